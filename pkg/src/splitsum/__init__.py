"""Split-sum image-based lighting: environment pre-integration, a trainable
illumination field, occlusion factors, split-sum shading, and a brute-force
reference renderer."""

from .brdf import (
    BrdfLut,
    bake_brdf_lut,
    cook_torrance_fs,
    integrate_brdf_cell,
    load_lut,
    lookup_lut,
    save_lut,
)
from .envmap import (
    RadianceMap,
    decode_rgbe,
    dir_to_uv,
    encode_rgbe,
    load_hdr,
    sample_bilinear,
    save_hdr,
    save_png_srgb,
    texel_solid_angles,
    uv_to_dir,
)
from .errors import (
    DegenerateEstimatorError,
    DivergenceError,
    HdrError,
    ObjParseError,
)
from .geometry import (
    Bvh,
    Material,
    MaterialTable,
    SurfacePoint,
    TriangleMesh,
    build_bvh,
    cuboid,
    load_obj,
    occluded,
    quad,
    sample_surface,
    save_obj,
    uv_sphere,
)
from .illum_field import (
    EncodingConfig,
    IllumField,
    TrainConfig,
    export_envmap,
    fit,
    load_field,
    loss_and_grad,
    new_illum_field,
    save_field,
)
from .occlusion import (
    OcclusionEstimate,
    load_occlusion_table,
    mc_occlusion,
    mc_occlusion_diffuse,
    mc_occlusion_specular,
    save_occlusion_table,
)
from .prefilter import (
    PrefilteredPyramid,
    bake_pyramid,
    diffuse_irradiance,
    draw_light_samples,
    load_pyramid,
    lookup_pyramid,
    mc_prefilter,
    ratio_estimate,
    save_pyramid,
)
from .reference import mc_reflectance, render_reference
from .sampling import RHO_MIN, RngStream, cos_hemisphere, ggx_lobe, uniform_sphere
from .shading import (
    Camera,
    IllumSource,
    Scene,
    camera_rays,
    render,
    shade,
    shade_diffuse,
    shade_specular,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
