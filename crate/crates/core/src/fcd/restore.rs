//! Feature fusion/upsampling and the deterministic denoising iteration
//!
//! ```text
//! B_{t-1} = sqrt(a_{t-1}) * (B_t - sqrt(1 - a_t) / sqrt(a_t) * eps(B_t, I_sr, C, t))
//! ```
//!
//! applied as written, without the extra direction term of textbook DDIM.

use super::FcdError;

/// Spatial upsampling factor of the reconstruction layer.
pub const UPSAMPLE_FACTOR: usize = 4;

/// Number of denoising iterations used by default.
pub const DEFAULT_DENOISE_STEPS: usize = 20;

/// Dense `H × W × C` float field, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageField {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ImageField {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self, FcdError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(FcdError::Shape(format!("zero extent {height}x{width}x{channels}")));
        }
        if values.len() != height * width * channels {
            return Err(FcdError::Shape(format!(
                "{} values for {height}x{width}x{channels}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FcdError::Validation("non-finite value in image field".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, FcdError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    fn same_shape(&self, other: &ImageField) -> bool {
        self.shape() == other.shape()
    }
}

/// Shallow and deep encoder features to be fused.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub shallow: ImageField,
    pub deep: ImageField,
}

/// Fusion layer turning aligned feature maps into an image upsampled by
/// [`UPSAMPLE_FACTOR`].
pub trait FusionKernel {
    fn fuse(&self, maps: &FeatureMaps) -> Result<ImageField, FcdError>;
}

/// Reference fusion: elementwise sum followed by nearest-neighbour ×4.
#[derive(Debug, Clone, Copy, Default)]
pub struct NearestUpsampleKernel;

impl FusionKernel for NearestUpsampleKernel {
    fn fuse(&self, maps: &FeatureMaps) -> Result<ImageField, FcdError> {
        let (h, w, c) = maps.shallow.shape();
        if maps.deep.channels() != c {
            return Err(FcdError::Shape(format!(
                "reference kernel sums channels elementwise: {c} vs {}",
                maps.deep.channels()
            )));
        }
        let f = UPSAMPLE_FACTOR;
        let (oh, ow) = (h * f, w * f);
        let mut out = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    out.push(maps.shallow.get(y / f, x / f, ch) + maps.deep.get(y / f, x / f, ch));
                }
            }
        }
        ImageField::new(oh, ow, c, out)
    }
}

/// Fuses `maps` with `kernel` and checks the output is upsampled ×4.
pub fn reconstruct(maps: &FeatureMaps, kernel: &dyn FusionKernel) -> Result<ImageField, FcdError> {
    let (s, d) = (&maps.shallow, &maps.deep);
    if s.height() != d.height() || s.width() != d.width() {
        return Err(FcdError::Shape(format!(
            "feature maps misaligned: {}x{} vs {}x{}",
            s.height(),
            s.width(),
            d.height(),
            d.width()
        )));
    }
    let out = kernel.fuse(maps)?;
    if out.height() != s.height() * UPSAMPLE_FACTOR || out.width() != s.width() * UPSAMPLE_FACTOR {
        return Err(FcdError::Shape(format!(
            "fusion kernel produced {}x{}, expected {}x{}",
            out.height(),
            out.width(),
            s.height() * UPSAMPLE_FACTOR,
            s.width() * UPSAMPLE_FACTOR
        )));
    }
    Ok(out)
}

/// Diffusion control parameters `alphas[t]` for `t = 0..=T`, each in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSchedule {
    alphas: Vec<f64>,
}

impl AlphaSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self, FcdError> {
        if alphas.len() < 2 {
            return Err(FcdError::InvalidSchedule("needs at least one step".into()));
        }
        for (t, &a) in alphas.iter().enumerate() {
            if a == 0.0 {
                return Err(FcdError::SingularSchedule(t));
            }
            if !(a > 0.0 && a <= 1.0) {
                return Err(FcdError::InvalidSchedule(format!("alpha[{t}] = {a} outside (0, 1]")));
            }
        }
        Ok(Self { alphas })
    }

    /// `steps + 1` values falling linearly from `1.0` at `t = 0` to `last` at
    /// `t = steps`.
    pub fn linear(steps: usize, last: f64) -> Result<Self, FcdError> {
        if steps == 0 {
            return Err(FcdError::InvalidSchedule("needs at least one step".into()));
        }
        let alphas = (0..=steps)
            .map(|t| 1.0 + (last - 1.0) * t as f64 / steps as f64)
            .collect();
        Self::new(alphas)
    }

    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

/// Noise estimate `eps(B_t, I_sr, C, t)`; must return a field shaped like `b_t`.
pub trait NoisePredictor {
    fn predict(&self, b_t: &ImageField, i_sr: &ImageField, prior: &ImageField, t: usize) -> Result<ImageField, FcdError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, b_t: &ImageField, _: &ImageField, _: &ImageField, _: usize) -> Result<ImageField, FcdError> {
        let (h, w, c) = b_t.shape();
        ImageField::filled(h, w, c, 0.0)
    }
}

/// Predicts the same constant everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl NoisePredictor for ConstantPredictor {
    fn predict(&self, b_t: &ImageField, _: &ImageField, _: &ImageField, _: usize) -> Result<ImageField, FcdError> {
        let (h, w, c) = b_t.shape();
        ImageField::filled(h, w, c, self.0)
    }
}

/// One denoising step from `t` to `t - 1`.
pub fn ddim_step(
    b_t: &ImageField,
    i_sr: &ImageField,
    prior_c: &ImageField,
    t: usize,
    sched: &AlphaSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<ImageField, FcdError> {
    if t == 0 || t > sched.steps() {
        return Err(FcdError::Validation(format!("step {t} outside 1..={}", sched.steps())));
    }
    let (a_t, a_prev) = (sched.alpha(t), sched.alpha(t - 1));
    if a_t <= 0.0 {
        return Err(FcdError::SingularSchedule(t));
    }
    let eps = predictor.predict(b_t, i_sr, prior_c, t)?;
    if !eps.same_shape(b_t) {
        return Err(FcdError::Shape(format!(
            "predictor returned {:?} for input {:?}",
            eps.shape(),
            b_t.shape()
        )));
    }
    let coef = (1.0 - a_t).sqrt() / a_t.sqrt();
    let scale = a_prev.sqrt();
    let values = b_t
        .values
        .iter()
        .zip(&eps.values)
        .map(|(&b, &e)| scale * (b - coef * e))
        .collect();
    ImageField::new(b_t.height, b_t.width, b_t.channels, values)
}

/// Runs `steps` iterations from `t = steps` down to `t = 1` and returns `B_0`.
pub fn run_denoise(
    image: &ImageField,
    i_sr: &ImageField,
    prior_c: &ImageField,
    sched: &AlphaSchedule,
    predictor: &dyn NoisePredictor,
    steps: usize,
) -> Result<ImageField, FcdError> {
    if steps > sched.steps() {
        return Err(FcdError::InvalidSchedule(format!(
            "schedule covers {} steps, {steps} requested",
            sched.steps()
        )));
    }
    let mut b = image.clone();
    for t in (1..=steps).rev() {
        b = ddim_step(&b, i_sr, prior_c, t, sched, predictor)?;
    }
    Ok(b)
}
