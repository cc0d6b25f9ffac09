"""Neural deformable models for bi-ventricular shape reconstruction.

Blended deformable superquadrics with smooth parameter functions, axis-offset
bending and a diffeomorphic point flow, fitted per instance to sparse labelled
point clouds (LV endocardium, LV epicardium, RV).
"""
from .fitting import DESK, FitConfig, FitReport, fit, gradient, total_loss
from .flow import FlowConfig, VelocityField, integrate_backward, integrate_forward
from .geometry import SURFACE_NAMES, DomainConfig, GlobalParams, MaterialCoord
from .metrics import LabeledPointCloud, chamfer, emd, point_to_surface
from .model import NdmModel
from .registration import build_correspondence, register

__all__ = [
    "DESK", "DomainConfig", "FitConfig", "FitReport", "FlowConfig", "GlobalParams", "LabeledPointCloud",
    "MaterialCoord", "NdmModel", "SURFACE_NAMES", "VelocityField", "build_correspondence", "chamfer",
    "emd", "fit", "gradient", "integrate_backward", "integrate_forward", "point_to_surface",
    "register", "total_loss",
]
