from arit.imagecore.io import (
    image_io,
    list_images,
    manifest_io,
    read_dataset,
    read_manifest,
    read_pfm,
    read_png,
    read_pose,
    write_dataset,
    write_manifest,
    write_pfm,
    write_png,
    write_pose,
)
from arit.imagecore.lumen import camera_intrinsics, generate_lumen_dataset, intrinsics_for, render_frame
from arit.imagecore.types import (
    CameraPose,
    DatasetManifest,
    ImageTensor,
    SceneSample,
    as_image,
    matrix_to_quat,
    quat_to_matrix,
)
