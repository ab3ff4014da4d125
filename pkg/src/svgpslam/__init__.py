"""RBPF SLAM with per-particle online SVGP bathymetric maps."""

from .core import (BeamLog, ControlInput, EmptyDatasetError, OrderingError, Ping, Pose,
                   TrainingPoint, append_ping, sample_uniform, transform_beam,
                   transform_beams, wrap_angle)
from .svgp import (KernelParams, NumericalError, PosteriorPrediction, SvgpModel,
                   convergence_check, elbo_minibatch, init_inducing_uniform,
                   kernel_matern12, kl_divergence, load_checkpoint, new_model,
                   optimizer_step, posterior, save_checkpoint)
from .lineage import SegmentIndex, TrajectoryHistory, TrajectorySegment, pose_at
from .filter import (Particle, ParticleSet, Trajectory, build_minibatch,
                     effective_sample_size, estimate_trajectory, lc_prompting,
                     make_particle_set, predict, resample, svgp_iteration,
                     systematic_indices, weigh_particles)
from .sim import SurveyConfig, TerrainField, run_mission, simulate_ping, terrain_height
from .surveylog import LogFormatError, ingest_log, write_log
from .evaluation import (GridMap, RunReport, consistency_error, export_map_grid,
                         throughput_report, trajectory_error)
from .scheduler import TrainerPool
