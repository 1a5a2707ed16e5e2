from arit.splatting.features import ConvEmbedder, FeatureExtractor, SeededConvExtractor, default_embedder, default_extractor
from arit.splatting.gaussians import Gaussian3D, GaussianCloud, covariance_from, covariances, load_cloud, save_cloud
from arit.splatting.losses import content_loss, style_loss
from arit.splatting.optimize import optimize_colors
from arit.splatting.pseudo import (
    PseudoLabelConfig,
    generate_pseudo_labels,
    init_cloud_from_depth,
    pseudo_label_frame,
    write_pseudo_dataset,
)
from arit.splatting.render import RenderConfig, RenderResult, composite, project_cloud, project_gaussian, render
