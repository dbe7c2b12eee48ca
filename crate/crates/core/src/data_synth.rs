//! Procedural multi-domain toy driving scenes.
//!
//! Every scene is a horizon split into sky and ground, ground carved into
//! road/terrain column patches, plus building and vehicle rectangles. Ground
//! truth is exact by construction: a pixel's label is the class that painted
//! it last. Domains differ in appearance only (brightness, color tilt, noise,
//! stripe texture), which keeps the task learnable by a tiny net while making
//! adaptation measurable. Class ids: road=0, sky=1, terrain=2, vehicle=3,
//! building=4; the open class takes id `|C|`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::rng::named_stream;
use crate::scalar::Scalar;

pub const CLASS_ROAD: u8 = 0;
pub const CLASS_SKY: u8 = 1;
pub const CLASS_TERRAIN: u8 = 2;
pub const CLASS_VEHICLE: u8 = 3;
pub const CLASS_BUILDING: u8 = 4;

/// Amplitude of the stripe texture bands (period comes from the appearance).
pub const STRIPE_AMP: f64 = 0.05;

/// Per-domain appearance shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainAppearance {
    /// Uniform brightness offset added to every channel.
    pub brightness: f64,
    /// Std-dev of per-pixel, per-channel Gaussian noise.
    pub noise_sigma: f64,
    /// Stripe band width in pixels; 0 disables the texture.
    pub stripe_period: usize,
    /// Channel tilt: adds `(+shift, 0, -shift)`.
    pub color_shift: f64,
}

impl Default for DomainAppearance {
    fn default() -> Self {
        DomainAppearance {
            brightness: 0.0,
            noise_sigma: 0.05,
            stripe_period: 0,
            color_shift: 0.0,
        }
    }
}

/// Open-set injection parameters for target domains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenSetParams {
    /// Fresh label id; `|C|` by default.
    pub open_id: u8,
    /// The physically similar closed-set class whose objects get converted.
    pub similar_class: u8,
    /// Bound of the per-image color perturbation applied to converted objects.
    pub perturb: f64,
    /// Per-image probability of converting one object.
    pub inject_prob: f64,
}

impl Default for OpenSetParams {
    fn default() -> Self {
        OpenSetParams {
            open_id: 5,
            similar_class: CLASS_VEHICLE,
            perturb: 0.08,
            inject_prob: 0.5,
        }
    }
}

/// Scene layout and appearance for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Base color per closed class; `len()` is the closed-set size.
    pub base_colors: Vec<[f64; 3]>,
    pub appearance: DomainAppearance,
    pub open_set: OpenSetParams,
    /// Fraction of the height above the horizon (sky).
    pub horizon_frac: f64,
    /// Inclusive range of vehicles per image.
    pub vehicle_count: (usize, usize),
    pub building_prob: f64,
    pub seed: u64,
}

/// road, sky, terrain, vehicle, building.
pub fn default_palette() -> Vec<[f64; 3]> {
    vec![
        [0.30, 0.30, 0.32],
        [0.55, 0.70, 0.90],
        [0.35, 0.55, 0.25],
        [0.70, 0.15, 0.15],
        [0.55, 0.45, 0.35],
    ]
}

impl SceneConfig {
    pub fn toy(seed: u64) -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            base_colors: default_palette(),
            appearance: DomainAppearance::default(),
            open_set: OpenSetParams::default(),
            horizon_frac: 0.4,
            vehicle_count: (0, 3),
            building_prob: 0.7,
            seed,
        }
    }

    pub fn num_closed(&self) -> usize {
        self.base_colors.len()
    }

    fn validate(&self, n_images: usize) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::ImageTooSmall {
                h: self.height,
                w: self.width,
            });
        }
        if n_images == 0 {
            return Err(Error::InvalidConfig("n_images must be at least 1".into()));
        }
        if self.base_colors.len() < 4 {
            return Err(Error::InvalidConfig(
                "palette needs road/sky/terrain/vehicle at minimum".into(),
            ));
        }
        if self.appearance.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
        }
        if self.vehicle_count.0 > self.vehicle_count.1 {
            return Err(Error::InvalidConfig("vehicle count range inverted".into()));
        }
        Ok(())
    }
}

/// Which distribution a dataset was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    Source(usize),
    Target,
}

impl DomainKind {
    pub fn stream_name(&self) -> String {
        match self {
            DomainKind::Source(i) => format!("source{i}"),
            DomainKind::Target => "target".into(),
        }
    }
}

/// Images plus exact ground truth for one domain.
#[derive(Debug, Clone)]
pub struct DomainDataset<F: Scalar> {
    pub items: Vec<(Tensor<F>, LabelMap)>,
    pub kind: DomainKind,
    pub num_closed: usize,
    /// Open-set ids present in the ground truth; empty for sources.
    pub open_ids: Vec<u8>,
}

impl<F: Scalar> DomainDataset<F> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.items.iter().map(|(img, _)| img)
    }
}

/// Generates `n_images` scenes for one domain. Deterministic per
/// `(seed, domain kind, image index)`.
pub fn generate_domain<F: Scalar>(
    cfg: &SceneConfig,
    n_images: usize,
    kind: DomainKind,
) -> Result<DomainDataset<F>> {
    cfg.validate(n_images)?;
    let domain = kind.stream_name();
    let mut items = Vec::with_capacity(n_images);
    for index in 0..n_images {
        let mut rng = named_stream(cfg.seed, &format!("data/{domain}/img{index}"));
        items.push(generate_scene(cfg, &mut rng)?);
    }
    let ds = DomainDataset {
        items,
        kind,
        num_closed: cfg.num_closed(),
        open_ids: Vec::new(),
    };
    debug_assert!(ds.items.iter().all(|(_, gt)| {
        let mut seen = std::collections::BTreeSet::new();
        for &l in gt.labels() {
            seen.insert(l);
        }
        seen.len() >= 2 && seen.iter().all(|&l| (l as usize) < cfg.num_closed())
    }));
    Ok(ds)
}

fn generate_scene<F: Scalar>(
    cfg: &SceneConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<F>, LabelMap)> {
    let (h, w) = (cfg.height, cfg.width);
    let mut gt = LabelMap::filled(h, w, CLASS_SKY);

    // Horizon with a little jitter; keep >= 2 sky rows and >= 4 ground rows.
    let base = (h as f64 * cfg.horizon_frac).round() as i64;
    let horizon = (base + rng.random_range(-1..=1)).clamp(2, h as i64 - 4) as usize;

    // Ground: column segments of road or terrain.
    let n_segments = rng.random_range(2..=4usize);
    let mut cuts: Vec<usize> = (0..n_segments - 1)
        .map(|_| rng.random_range(1..w))
        .collect();
    cuts.push(0);
    cuts.push(w);
    cuts.sort_unstable();
    cuts.dedup();
    for pair in cuts.windows(2) {
        let class = if rng.random::<f64>() < 0.5 {
            CLASS_ROAD
        } else {
            CLASS_TERRAIN
        };
        for y in horizon..h {
            for x in pair[0]..pair[1] {
                gt.set(y, x, class);
            }
        }
    }

    // Building rectangle resting on the horizon line.
    if cfg.base_colors.len() > CLASS_BUILDING as usize && rng.random::<f64>() < cfg.building_prob {
        let bh = rng.random_range(3..=(horizon.saturating_sub(1)).clamp(3, 8));
        let bw = rng.random_range(4..=(w / 2).max(5));
        let x0 = rng.random_range(0..=w - bw);
        for y in horizon.saturating_sub(bh)..horizon {
            for x in x0..x0 + bw {
                gt.set(y, x, CLASS_BUILDING);
            }
        }
    }

    // Vehicle rectangles on the ground.
    let n_vehicles = rng.random_range(cfg.vehicle_count.0..=cfg.vehicle_count.1);
    for _ in 0..n_vehicles {
        let vh = rng.random_range(4..=6usize);
        let vw = rng.random_range(5..=8usize);
        if horizon + vh >= h || vw >= w {
            continue;
        }
        let y0 = rng.random_range(horizon..h - vh);
        let x0 = rng.random_range(0..w - vw);
        for y in y0..y0 + vh {
            for x in x0..x0 + vw {
                gt.set(y, x, CLASS_VEHICLE);
            }
        }
    }

    let image = paint(cfg, &gt, rng)?;
    Ok((image, gt))
}

/// Colors a ground-truth map: base color + tilt + brightness + stripes +
/// Gaussian noise, clamped to `[0, 1]`.
fn paint<F: Scalar>(cfg: &SceneConfig, gt: &LabelMap, rng: &mut impl Rng) -> Result<Tensor<F>> {
    let (h, w) = (cfg.height, cfg.width);
    let a = &cfg.appearance;
    let noise = if a.noise_sigma > 0.0 {
        Some(Normal::new(0.0, a.noise_sigma).expect("validated sigma"))
    } else {
        None
    };
    let tilt = [a.color_shift, 0.0, -a.color_shift];
    let mut t = Tensor::zeros(vec![3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let class = gt.get(y, x) as usize;
            let stripe = match a.stripe_period {
                0 => 0.0,
                p if (x / p).is_multiple_of(2) => STRIPE_AMP,
                _ => -STRIPE_AMP,
            };
            for (c, t_c) in tilt.iter().enumerate() {
                let mut v = cfg.base_colors[class][c] + t_c + a.brightness + stripe;
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                let idx = t.idx3(c, y, x);
                t.values_mut()[idx] = F::from_f64_lit(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(t)
}

/// Converts one vehicle object per selected image into the open class:
/// ground truth flips to the open id and the object's pixels get a bounded
/// color perturbation, keeping them near the vehicle manifold. Images without
/// vehicles are skipped (logged), never an error.
pub fn inject_open_set<F: Scalar>(
    mut ds: DomainDataset<F>,
    cfg: &SceneConfig,
) -> Result<DomainDataset<F>> {
    if ds.kind != DomainKind::Target {
        return Err(Error::InvalidConfig(
            "open-set injection applies to target datasets only".into(),
        ));
    }
    let params = cfg.open_set;
    let mut injected = 0usize;
    for (index, (image, gt)) in ds.items.iter_mut().enumerate() {
        let mut rng = named_stream(cfg.seed, &format!("inject/img{index}"));
        if rng.random::<f64>() >= params.inject_prob {
            continue;
        }
        let component = match first_component(gt, params.similar_class) {
            Some(c) => c,
            None => {
                log::debug!("open-set injection: image {index} has no vehicle, skipped");
                continue;
            }
        };
        // Fixed magnitude, random sign per channel: far enough off the
        // vehicle manifold to look new, close enough to stay vehicle-like.
        let delta: [f64; 3] = std::array::from_fn(|_| {
            if rng.random::<f64>() < 0.5 {
                -params.perturb
            } else {
                params.perturb
            }
        });
        for &(y, x) in &component {
            gt.set(y, x, params.open_id);
            for (c, d) in delta.iter().enumerate() {
                let idx = image.idx3(c, y, x);
                let v = image.values()[idx].to_f64().unwrap() + d;
                image.values_mut()[idx] = F::from_f64_lit(v.clamp(0.0, 1.0));
            }
        }
        injected += 1;
    }
    log::info!("open-set injection: {injected}/{} images converted", ds.len());
    if injected > 0 && !ds.open_ids.contains(&params.open_id) {
        ds.open_ids.push(params.open_id);
    }
    Ok(ds)
}

/// 4-connected component of `class` containing the first such pixel in scan
/// order.
fn first_component(gt: &LabelMap, class: u8) -> Option<Vec<(usize, usize)>> {
    let (h, w) = (gt.height(), gt.width());
    let start = (0..h * w).find(|&i| gt.labels()[i] == class)?;
    let mut seen = vec![false; h * w];
    let mut queue = std::collections::VecDeque::new();
    let mut out = Vec::new();
    seen[start] = true;
    queue.push_back(start);
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        out.push((y, x));
        let mut push = |j: usize| {
            if !seen[j] && gt.labels()[j] == class {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if y > 0 {
            push(i - w);
        }
        if y + 1 < h {
            push(i + w);
        }
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < w {
            push(i + 1);
        }
    }
    Some(out)
}

/// Test fixture for best-source recovery: the twin source shares the target's
/// exact appearance (different RNG stream); the others use the given shifted
/// appearances.
pub fn rigged_target_source<F: Scalar>(
    target_cfg: &SceneConfig,
    source_appearances: &[DomainAppearance],
    twin: usize,
    n_source_images: usize,
    n_target_images: usize,
) -> Result<(Vec<DomainDataset<F>>, DomainDataset<F>)> {
    if source_appearances.len() < 2 {
        return Err(Error::TooFewSources(source_appearances.len()));
    }
    if twin >= source_appearances.len() {
        return Err(Error::InvalidConfig(format!(
            "twin index {twin} out of range for {} sources",
            source_appearances.len()
        )));
    }
    let target = generate_domain(target_cfg, n_target_images, DomainKind::Target)?;
    let mut sources = Vec::with_capacity(source_appearances.len());
    for (i, appearance) in source_appearances.iter().enumerate() {
        let mut cfg = target_cfg.clone();
        cfg.appearance = if i == twin {
            target_cfg.appearance
        } else {
            *appearance
        };
        sources.push(generate_domain(&cfg, n_source_images, DomainKind::Source(i))?);
    }
    Ok((sources, target))
}
