"""Physics-based cryo-EM micrograph synthesis, contrastive-loss kernels and evaluation."""

from .volume_io import DensityVolume, Micrograph, read_mrc, write_mrc, normalize_intensity
from .specimen import PlacementConfig, SpecimenLayout, place_particles, project_particle, composite_projection
from .optics import CtfParams, ctf_image, ctf_value, apply_psf
from .synthesis import IceGradientParams, NoiseSpec, synthesize_physical, add_noise, make_particle_mask
from .evalkit import fsc, auprc, pr_curve, match_picks, rotation_error, align_rotations
from .recon_fbp import ProjectionStack, fbp_reconstruct, split_half_sets

__version__ = "0.1.0"
