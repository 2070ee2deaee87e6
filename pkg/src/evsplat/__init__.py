"""Event-assisted deblurring of Gaussian splat scenes on the CPU."""
__version__ = "0.1.0"

from .event_core import EventMap, EventStream, Thresholds, integrate_events, simulate_events, warp_intensity
from .edi import BlurFrame, edi_latents, edi_sharp
from .gsplat import Camera, GaussianScene, RenderOutput, load_scene, render, render_with_grad, save_scene
from .trajectory import CameraTrajectory, ate, effective_pose, interpolate_pose, synthesize_blur
from .losses import LossWeights, blur_loss, depth_reg_loss, dssim, event_loss, intensity_loss, total_loss
from .trainer import TrainConfig, adam_step, init_scene, train
from .synthdata import generate_dataset, load_dataset, make_scene, make_trajectory
from .eval_metrics import EvalReport, evaluate, psnr, ssim
