"""Parametric seal rendering and exact-label compositing onto documents.

Every function here is pure: outputs depend only on the arguments (and the
seeded numpy Generator passed in), so calls are safe from any number of workers.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from modules import glyphs
from modules.errors import (
    InvalidSealSpec,
    OutOfBounds,
    TextTooLongForArc,
    WarpOutOfBounds,
)

SUPERSAMPLE = 4
ALPHA_FLOOR = 1.0 / 512.0
# glyphs may overlap their neighbours by at most this fraction of a cell
PACKING_THRESHOLD = 0.8
MAX_SHEAR = 0.2
MAX_RADIAL = 0.1
# source-space ink beyond outer_radius: pixel half-diagonal, blur tail, bilinear support
INK_PAD = 5.0

REAL_PROXY_INK_MEAN = (0.55, 0.12, 0.30)
REAL_PROXY_INK_SIGMA = 0.04
PROVENANCES = ("synthetic", "forged", "real")


@dataclass(frozen=True)
class WarpParams:
    """Geometric perturbation: counter-clockwise rotation (degrees), shear, radial distortion."""

    rotation: float = 0.0
    shear: float = 0.0
    radial_distortion: float = 0.0

    def __post_init__(self):
        if not -MAX_SHEAR <= self.shear <= MAX_SHEAR:
            raise WarpOutOfBounds(f"shear {self.shear} outside [-{MAX_SHEAR}, {MAX_SHEAR}]")
        if not -MAX_RADIAL <= self.radial_distortion <= MAX_RADIAL:
            raise WarpOutOfBounds(
                f"radial_distortion {self.radial_distortion} outside [-{MAX_RADIAL}, {MAX_RADIAL}]"
            )
        if not math.isfinite(self.rotation):
            raise WarpOutOfBounds("rotation must be finite")

    @property
    def is_identity(self):
        return self.rotation == 0.0 and self.shear == 0.0 and self.radial_distortion == 0.0


@dataclass(frozen=True)
class SealSpec:
    """Position, size and text of one seal plus its appearance parameters."""

    text: str
    center: tuple
    outer_radius: float
    ring_width: float
    glyph_height: float
    arc_span: float
    star_scale: float = 0.0
    ink_rgb: tuple = (0.78, 0.08, 0.10)
    base_opacity: float = 1.0
    texture_seed: int = 0
    warp: WarpParams = field(default_factory=WarpParams)
    ink_law: str = "traditional"

    def __post_init__(self):
        if not self.ring_width >= 1.0:
            raise InvalidSealSpec(f"ring_width must be >= 1 px, got {self.ring_width}")
        if not self.outer_radius > self.ring_width:
            raise InvalidSealSpec("outer_radius must exceed ring_width")
        if not 0.0 < self.arc_span <= 360.0:
            raise InvalidSealSpec(f"arc_span {self.arc_span} outside (0, 360]")
        if len(self.ink_rgb) != 3 or not all(0.0 <= c <= 1.0 for c in self.ink_rgb):
            raise InvalidSealSpec(f"ink_rgb must be three values in [0,1], got {self.ink_rgb}")
        if not 0.0 < self.base_opacity <= 1.0:
            raise InvalidSealSpec(f"base_opacity {self.base_opacity} outside (0, 1]")
        if not 0.0 <= self.star_scale <= 1.0:
            raise InvalidSealSpec(f"star_scale {self.star_scale} outside [0, 1]")
        if self.glyph_height <= 0:
            raise InvalidSealSpec("glyph_height must be positive")
        if not glyphs.supported(self.text):
            raise InvalidSealSpec(f"text {self.text!r} uses characters outside the glyph set")
        if self.ink_law not in ("traditional", "real_proxy"):
            raise InvalidSealSpec(f"unknown ink law '{self.ink_law}'")


@dataclass
class SealStamp:
    """RGBA raster of a rendered seal; alpha is ink coverage in [0, 1]."""

    raster: np.ndarray
    spec: SealSpec
    tight_bbox: tuple

    @property
    def alpha(self):
        return self.raster[..., 3]

    @property
    def half(self):
        return self.raster.shape[0] // 2

    def scaled(self, factor):
        """Return a copy with alpha multiplied by ``factor`` (0 gives transparent ink)."""
        raster = self.raster.copy()
        raster[..., 3] = _floor_alpha(raster[..., 3] * float(factor))
        return SealStamp(raster, self.spec, tight_bbox(raster[..., 3]))


@dataclass
class LabeledSample:
    """A stamped document together with the labels that came for free."""

    clean_doc: np.ndarray
    stamped: np.ndarray
    mask: np.ndarray
    text: str
    bbox: tuple
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance '{self.provenance}'")


def tight_bbox(alpha):
    """Smallest (x0, y0, x1, y1) rectangle, end-exclusive, holding every alpha > 0."""
    ys, xs = np.nonzero(alpha > 0)
    if len(xs) == 0:
        return (0, 0, 0, 0)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def bbox_center(bbox):
    x0, y0, x1, y1 = bbox
    return ((x0 + x1) // 2, (y0 + y1) // 2)


def _floor_alpha(alpha):
    alpha = np.clip(alpha, 0.0, 1.0)
    alpha[alpha < ALPHA_FLOOR] = 0.0
    return alpha


def _truncated_normal(rng, mean, sigma, lo, hi):
    if sigma == 0:
        return float(min(max(mean, lo), hi))
    for _ in range(1000):
        value = rng.normal(mean, sigma)
        if lo <= value <= hi:
            return float(value)
    return float(min(max(mean, lo), hi))


def sample_ink(rng, mean, sigma):
    """Draw an ink colour from a per-channel Gaussian truncated at 2 sigma and [0, 1]."""
    return tuple(
        _truncated_normal(rng, m, sigma, max(0.0, m - 2 * sigma), min(1.0, m + 2 * sigma))
        for m in mean
    )


def warped_reach(outer_radius, max_shear=MAX_SHEAR, max_radial=MAX_RADIAL):
    """
    Largest distance from the seal centre that ink can land on after warping.

    Shear stretches radii by at most the top singular value of [[1, s], [0, 1]];
    rotation keeps them; radial distortion maps rho to rho * (1 + k (rho / r)^2).

    Args:
        outer_radius (float): Seal outer radius in pixels
        max_shear (float): Largest |shear| that may be drawn
        max_radial (float): Largest |radial_distortion| that may be drawn

    Returns:
        float: reach in pixels
    """
    s, k = abs(max_shear), abs(max_radial)
    stretch = (s + math.sqrt(s * s + 4.0)) / 2.0
    rho = (outer_radius + INK_PAD) * stretch
    return rho * (1.0 + k * (rho / outer_radius) ** 2)


def stamp_margin(outer_radius, max_shear=MAX_SHEAR, max_radial=MAX_RADIAL):
    """Closest a seal centre may sit to the page edge, in whole pixels."""
    return int(math.ceil(warped_reach(outer_radius, max_shear, max_radial))) + 2


def sample_seal_spec(rng, cfg):
    """
    Draw a SealSpec whose every field lies inside the config ranges.

    Args:
        rng (numpy.random.Generator): Seeded generator
        cfg (SynthConfig): Parameter ranges

    Returns:
        SealSpec: the sampled seal, centred so that its warped ink fits the page
    """
    cfg.validate()
    height, width = cfg.doc_size
    text = cfg.text_pool[int(rng.integers(len(cfg.text_pool)))]
    radius = float(rng.uniform(*cfg.radius_range))
    ring = float(rng.uniform(*cfg.ring_width_range))
    glyph_height = float(rng.uniform(*cfg.glyph_height_range))
    arc_span = float(rng.uniform(*cfg.arc_span_range))
    star_scale = float(rng.uniform(*cfg.star_scale_range))
    opacity = float(rng.uniform(*cfg.opacity_range))
    if cfg.style == "real_proxy":
        ink = sample_ink(rng, REAL_PROXY_INK_MEAN, REAL_PROXY_INK_SIGMA)
    else:
        ink = sample_ink(rng, cfg.ink_mean, cfg.ink_sigma)
    margin = stamp_margin(radius, cfg.max_shear, cfg.max_radial)
    center = (int(rng.integers(margin, width - margin + 1)),
              int(rng.integers(margin, height - margin + 1)))
    warp = WarpParams(
        rotation=float(rng.uniform(*cfg.rotation_range)),
        shear=float(rng.uniform(*cfg.shear_range)),
        radial_distortion=float(rng.uniform(*cfg.radial_range)),
    )
    return SealSpec(
        text=text,
        center=center,
        outer_radius=radius,
        ring_width=ring,
        glyph_height=glyph_height,
        arc_span=arc_span,
        star_scale=star_scale,
        ink_rgb=ink,
        base_opacity=opacity,
        texture_seed=int(rng.integers(2**31 - 1)),
        warp=warp,
        ink_law=cfg.style,
    )


def _text_coverage(spec, rho, phi, r_top):
    """Boolean coverage of the legend glyphs laid along the upper arc."""
    cover = np.zeros(rho.shape, dtype=bool)
    text = spec.text
    if not text:
        return cover
    glyph_h = spec.glyph_height
    r_bottom = r_top - glyph_h
    r_mid = 0.5 * (r_top + r_bottom)
    glyph_w = glyph_h * glyphs.GLYPH_COLS / glyphs.GLYPH_ROWS
    pitch_needed = glyph_h * (glyphs.GLYPH_COLS + 1) / glyphs.GLYPH_ROWS / r_mid
    span = math.radians(spec.arc_span)
    pitch = span / len(text)
    if pitch < PACKING_THRESHOLD * pitch_needed:
        raise TextTooLongForArc(
            f"{len(text)} glyphs need {math.degrees(pitch_needed * len(text)):.1f} degrees "
            f"but the arc spans {spec.arc_span:.1f}"
        )

    band = (rho >= r_bottom) & (rho < r_top)
    b_rho = rho[band]
    b_phi = phi[band]
    hit = np.zeros(b_rho.shape, dtype=bool)
    start = -math.pi / 2 - span / 2
    for k, ch in enumerate(text):
        bitmap = glyphs.glyph(ch)
        if not bitmap.any():
            continue
        theta = start + (k + 0.5) * pitch
        dphi = (b_phi - theta + math.pi) % (2 * math.pi) - math.pi
        u = dphi * r_mid
        v = r_top - b_rho
        col = np.floor((u / glyph_w + 0.5) * glyphs.GLYPH_COLS).astype(int)
        row = np.floor(v / glyph_h * glyphs.GLYPH_ROWS).astype(int)
        inside = (
            (col >= 0) & (col < glyphs.GLYPH_COLS)
            & (row >= 0) & (row < glyphs.GLYPH_ROWS)
            & (np.abs(dphi) < math.pi / 2)
        )
        lit = bitmap[np.clip(row, 0, glyphs.GLYPH_ROWS - 1), np.clip(col, 0, glyphs.GLYPH_COLS - 1)]
        hit |= inside & lit
    cover[band] = hit
    return cover


def _star_coverage(star_radius, half, n):
    """Five-pointed star rasterized with PIL at supersampled resolution."""
    img = Image.new("L", (n, n), 0)
    points = []
    for i in range(10):
        angle = -math.pi / 2 + i * math.pi / 5
        r = star_radius if i % 2 == 0 else star_radius * 0.382
        points.append(((half + r * math.cos(angle)) * SUPERSAMPLE,
                       (half + r * math.sin(angle)) * SUPERSAMPLE))
    ImageDraw.Draw(img).polygon(points, fill=255)
    return np.asarray(img) > 0


def _texture(spec, side):
    """Multiplicative ink texture in (0, 1], seeded by spec.texture_seed."""
    rng = np.random.default_rng(spec.texture_seed)
    noise = rng.random((side, side))
    if spec.ink_law == "real_proxy":
        blotches = ndimage.gaussian_filter(noise, sigma=2.5)
        span = blotches.max() - blotches.min()
        blotches = (blotches - blotches.min()) / (span if span > 0 else 1.0)
        grain = 0.85 + 0.15 * rng.random((side, side))
        return (0.35 + 0.65 * blotches) * grain
    smooth = ndimage.gaussian_filter(noise, sigma=1.0)
    span = smooth.max() - smooth.min()
    smooth = (smooth - smooth.min()) / (span if span > 0 else 1.0)
    return 0.75 + 0.25 * smooth


def render_seal(spec):
    """
    Rasterize ring, arc legend and star of a seal (no geometric warp yet).

    Args:
        spec (SealSpec): Seal description

    Returns:
        SealStamp: square RGBA raster centred on the seal; the alpha maximum is
        spec.base_opacity
    """
    # room for the largest legal warp
    half = stamp_margin(spec.outer_radius)
    side = 2 * half
    n = side * SUPERSAMPLE
    centers = (np.arange(n) + 0.5) / SUPERSAMPLE - half
    dx, dy = np.meshgrid(centers, centers)
    rho = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)

    r_out = spec.outer_radius
    r_in = r_out - spec.ring_width
    cover = (rho >= r_in) & (rho <= r_out)

    gap = max(1.0, 0.08 * r_out)
    r_top = r_in - gap
    if spec.text and r_top - spec.glyph_height <= 0:
        raise InvalidSealSpec("glyph_height leaves no room inside the ring")
    cover |= _text_coverage(spec, rho, phi, r_top)

    if spec.star_scale > 0:
        inner = max(r_top - spec.glyph_height, 0.0) if spec.text else r_in - gap
        star_radius = spec.star_scale * inner * 0.9
        if star_radius * SUPERSAMPLE >= 1.0:
            cover |= _star_coverage(star_radius, half, n)

    alpha = cover.reshape(side, SUPERSAMPLE, side, SUPERSAMPLE).mean(axis=(1, 3))
    if spec.ink_law == "real_proxy":
        alpha = ndimage.gaussian_filter(alpha, sigma=0.7)
    alpha = _floor_alpha(alpha * spec.base_opacity * _texture(spec, side))

    raster = np.empty((side, side, 4), dtype=np.float64)
    raster[..., :3] = np.asarray(spec.ink_rgb, dtype=np.float64)
    raster[..., 3] = alpha
    return SealStamp(raster, spec, tight_bbox(alpha))


def perturb_geometry(stamp, warp):
    """
    Apply rotation, shear and radial distortion about the stamp centre.

    Args:
        stamp (SealStamp): Input stamp
        warp (WarpParams): Perturbation, bounds enforced

    Returns:
        SealStamp: warped copy with tight_bbox recomputed
    """
    # re-run the bounds check in case the object was built around the constructor
    warp = WarpParams(warp.rotation, warp.shear, warp.radial_distortion)
    if warp.is_identity:
        return SealStamp(stamp.raster.copy(), stamp.spec, stamp.tight_bbox)

    side = stamp.raster.shape[0]
    c = side / 2.0
    pos = np.arange(side) + 0.5 - c
    px, py = np.meshgrid(pos, pos)

    k = warp.radial_distortion
    if k != 0.0:
        r0 = stamp.spec.outer_radius
        rho_out = np.hypot(px, py)
        rho = rho_out.copy()
        for _ in range(8):
            f = rho * (1 + k * (rho / r0) ** 2) - rho_out
            rho -= f / (1 + 3 * k * (rho / r0) ** 2)
        scale = np.divide(rho, rho_out, out=np.ones_like(rho), where=rho_out > 0)
        px, py = px * scale, py * scale
        if k < 0:
            # past the peak of rho * (1 + k rho^2 / r0^2) there is no source point
            rho_peak = r0 / math.sqrt(-3.0 * k)
            unreachable = rho_out > rho_peak * (1 + k * (rho_peak / r0) ** 2)
            px[unreachable] = py[unreachable] = 2.0 * side

    # forward map is rotation after shear; invert both
    theta = math.radians(warp.rotation)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rx = cos_t * px - sin_t * py
    ry = sin_t * px + cos_t * py
    qx = rx - warp.shear * ry
    qy = ry

    alpha = ndimage.map_coordinates(
        stamp.alpha, [qy + c - 0.5, qx + c - 0.5], order=1, mode="constant", cval=0.0
    )
    alpha = _floor_alpha(alpha)
    raster = stamp.raster.copy()
    raster[..., 3] = alpha
    return SealStamp(raster, stamp.spec, tight_bbox(alpha))


def placement_bbox(stamp):
    """Document-space ink rectangle of a stamp placed at its spec centre."""
    cx, cy = (int(round(v)) for v in stamp.spec.center)
    ox, oy = cx - stamp.half, cy - stamp.half
    x0, y0, x1, y1 = stamp.tight_bbox
    if x1 <= x0 or y1 <= y0:
        return (cx, cy, cx, cy)
    return (x0 + ox, y0 + oy, x1 + ox, y1 + oy)


def composite(doc, stamp, threshold=0.05):
    """
    Alpha-composite a stamp onto a document and derive exact labels.

    Args:
        doc (numpy.ndarray): H x W x 3 clean document, float in [0,1] or uint8
        stamp (SealStamp): Stamp placed at stamp.spec.center
        threshold (float): Mask threshold tau on alpha

    Returns:
        LabeledSample: provenance 'synthetic'; pixels with alpha == 0 keep
        their document value bit-exactly
    """
    doc = as_float_image(doc)
    alpha_doc = placed_alpha(stamp, doc.shape[:2])
    bbox = placement_bbox(stamp)

    a = alpha_doc[..., None]
    ink = np.asarray(stamp.spec.ink_rgb, dtype=np.float64)
    blended = doc * (1.0 - a) + ink * a
    stamped = np.where(a > 0, blended, doc)
    mask = alpha_doc > threshold
    return LabeledSample(
        clean_doc=doc,
        stamped=stamped,
        mask=mask,
        text=stamp.spec.text,
        bbox=tuple(int(v) for v in bbox),
        provenance="synthetic",
    )


def placement_offset(stamp):
    cx, cy = (int(round(v)) for v in stamp.spec.center)
    return (cx - stamp.half, cy - stamp.half)


def placed_alpha(stamp, size):
    """
    Stamp alpha laid onto an H x W document grid.

    Args:
        stamp (SealStamp): Stamp placed at stamp.spec.center
        size (tuple): (height, width) of the document

    Returns:
        numpy.ndarray: H x W alpha, zero away from the ink
    """
    height, width = size
    bbox = placement_bbox(stamp)
    x0, y0, x1, y1 = bbox
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise OutOfBounds(f"stamp ink {bbox} exceeds the {width}x{height} document")
    off_x, off_y = placement_offset(stamp)
    sx0, sy0 = x0 - off_x, y0 - off_y
    alpha_doc = np.zeros((height, width), dtype=np.float64)
    alpha_doc[y0:y1, x0:x1] = stamp.alpha[sy0:sy0 + (y1 - y0), sx0:sx0 + (x1 - x0)]
    return alpha_doc


def as_float_image(image):
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64, copy=True)


def legend_cells(center, n_chars):
    """
    Glyph cells of the legend line printed under a seal.

    Args:
        center (tuple): (x, y) centre of the line
        n_chars (int): Number of characters

    Returns:
        list: (x0, y0, x1, y1) end-exclusive cell per character
    """
    cx, cy = center
    pitch = glyphs.GLYPH_COLS + 1
    width = pitch * n_chars - 1
    left = cx - width // 2
    top = cy - glyphs.GLYPH_ROWS // 2
    return [
        (left + pitch * k, top, left + pitch * k + glyphs.GLYPH_COLS, top + glyphs.GLYPH_ROWS)
        for k in range(n_chars)
    ]


def make_document(rng, size, legend=None, legend_center=None, scanned=False):
    """
    Procedural text page: dark-gray word blocks on off-white paper.

    Args:
        rng (numpy.random.Generator): Seeded generator
        size (tuple): (height, width)
        legend (str): Optional string printed as a glyph line at legend_center
        legend_center (tuple): (x, y) of the printed legend
        scanned (bool): Apply paper tint and sensor noise

    Returns:
        numpy.ndarray: H x W x 3 float image in [0, 1]
    """
    height, width = size
    paper = 0.96 + float(rng.uniform(-0.02, 0.02))
    doc = np.empty((height, width, 3), dtype=np.float64)
    doc[...] = (paper, paper, paper - 0.01)

    y = int(rng.integers(2, 5))
    while True:
        line_h = int(rng.integers(2, 4))
        if y + line_h > height - 2:
            break
        x = int(rng.integers(2, 5))
        right = width - int(rng.integers(2, max(3, width // 4)))
        gray = float(rng.uniform(0.25, 0.4))
        while x < right:
            word = int(rng.integers(3, 10))
            doc[y:y + line_h, x:min(x + word, right)] = gray
            x += word + int(rng.integers(2, 4))
        y += line_h + int(rng.integers(3, 6))

    if legend:
        cells = legend_cells(legend_center, len(legend))
        lx0 = max(cells[0][0] - 1, 0)
        lx1 = min(cells[-1][2] + 1, width)
        ly0 = max(cells[0][1] - 1, 0)
        ly1 = min(cells[0][3] + 1, height)
        doc[ly0:ly1, lx0:lx1] = (paper, paper, paper - 0.01)
        for ch, (x0, y0, x1, y1) in zip(legend, cells):
            bitmap = glyphs.glyph(ch)
            for r in range(glyphs.GLYPH_ROWS):
                for c in range(glyphs.GLYPH_COLS):
                    yy, xx = y0 + r, x0 + c
                    if bitmap[r, c] and 0 <= yy < height and 0 <= xx < width:
                        doc[yy, xx] = 0.15

    if scanned:
        doc *= np.array([1.0, 0.97, 0.90])
        doc += rng.normal(0.0, 0.015, doc.shape)
        doc = np.clip(doc, 0.0, 1.0)
    return doc


def synthesize_sample(rng, cfg):
    """
    Spec -> render -> warp -> document -> composite, in one pure call.

    Args:
        rng (numpy.random.Generator): Seeded generator
        cfg (SynthConfig): Synthesizer configuration

    Returns:
        tuple: (LabeledSample, SealSpec)
    """
    spec = sample_seal_spec(rng, cfg)
    stamp = perturb_geometry(render_seal(spec), spec.warp)
    legend = spec.text if cfg.legend_on_document else None
    doc = make_document(
        rng,
        cfg.doc_size,
        legend=legend,
        legend_center=bbox_center(placement_bbox(stamp)),
        scanned=cfg.style == "real_proxy",
    )
    return composite(doc, stamp, cfg.mask_threshold), spec
