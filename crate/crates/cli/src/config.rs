//! Run configuration: flat `key = value` text with `#` comments.
//!
//! Every key has a documented default; unknown and duplicate keys are
//! rejected by name. The resolved configuration is echoed verbatim into the
//! run directory so later stages can verify they operate on the same run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};

use altinc_core::data_synth::{
    default_palette, DomainAppearance, DomainKind, OpenSetParams, SceneConfig,
};
use altinc_core::losses::{GanKind, LossWeights};
use altinc_core::pseudo::{OpenClass, OpenSetSpec};
use altinc_core::trainer::TrainConfig;
use altinc_core::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_h: usize,
    pub image_w: usize,
    pub num_sources: usize,
    pub images_per_source: usize,
    pub target_images: usize,
    pub horizon_frac: f64,
    pub vehicle_min: usize,
    pub vehicle_max: usize,
    pub building_prob: f64,
    /// Source index forced to share the target's appearance; -1 disables.
    pub rig_twin: i64,
    pub source_appearance: Vec<DomainAppearance>,
    pub target_appearance: DomainAppearance,
    pub open_inject_prob: f64,
    pub open_perturb: f64,
    pub open_similar_class: u8,
    pub epochs_per_round: usize,
    pub max_rounds: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub lambda_sup: f64,
    pub lambda_unsup: f64,
    pub lambda_distil: f64,
    pub lambda_adv: f64,
    pub gan: GanKind,
    pub beta: f64,
    pub epsilon: f64,
    pub tau_fraction: f64,
    pub kl_kappa: f64,
    pub retrain_after_boundless: bool,
    pub retrain_weight: f64,
    pub retrain_epochs: usize,
}

/// Default appearance shift for source `i`; spreads domains apart without
/// saturating colors.
pub fn default_source_appearance(i: usize) -> DomainAppearance {
    DomainAppearance {
        brightness: -0.10 + 0.11 * i as f64,
        noise_sigma: 0.05 + 0.03 * (i % 3) as f64,
        stripe_period: 4 * (i % 2),
        color_shift: -0.08 + 0.10 * i as f64,
    }
}

pub fn default_target_appearance() -> DomainAppearance {
    DomainAppearance {
        brightness: 0.05,
        noise_sigma: 0.07,
        stripe_period: 3,
        color_shift: -0.03,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let num_sources = 3;
        RunConfig {
            seed: 7,
            image_h: 32,
            image_w: 32,
            num_sources,
            images_per_source: 120,
            target_images: 120,
            horizon_frac: 0.4,
            vehicle_min: 0,
            vehicle_max: 3,
            building_prob: 0.7,
            rig_twin: -1,
            source_appearance: (0..num_sources).map(default_source_appearance).collect(),
            target_appearance: default_target_appearance(),
            open_inject_prob: 0.5,
            open_perturb: 0.08,
            open_similar_class: altinc_core::data_synth::CLASS_VEHICLE,
            epochs_per_round: 2,
            max_rounds: 4,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 4,
            lambda_sup: 1.0,
            lambda_unsup: 0.5,
            lambda_distil: 0.1,
            lambda_adv: 0.01,
            gan: GanKind::Vanilla,
            beta: 5.0,
            epsilon: 0.01,
            tau_fraction: 0.85,
            kl_kappa: 0.5,
            retrain_after_boundless: false,
            retrain_weight: 0.5,
            retrain_epochs: 1,
        }
    }
}

impl RunConfig {
    /// Parses flat key=value text. Unknown keys, duplicate keys, and
    /// malformed values are rejected by name.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", lineno + 1))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if pairs.insert(key.clone(), value).is_some() {
                bail!("duplicate config key {key:?}");
            }
        }

        let mut cfg = RunConfig::default();
        if let Some(v) = pairs.get("num_sources") {
            cfg.num_sources = parse_value("num_sources", v)?;
            if cfg.num_sources < 2 {
                bail!("num_sources must be at least 2");
            }
            cfg.source_appearance = (0..cfg.num_sources).map(default_source_appearance).collect();
        }

        for (key, value) in &pairs {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        // Per-source appearance keys: source{i}_{field}.
        if let Some(rest) = key.strip_prefix("source") {
            if let Some((idx, field)) = rest.split_once('_') {
                if let Ok(i) = idx.parse::<usize>() {
                    if i >= self.num_sources {
                        bail!(
                            "unknown config key {key:?} (only {} sources configured)",
                            self.num_sources
                        );
                    }
                    return apply_appearance(&mut self.source_appearance[i], key, field, value);
                }
            }
        }
        if let Some(field) = key.strip_prefix("target_") {
            if matches!(
                field,
                "brightness" | "noise_sigma" | "stripe_period" | "color_shift"
            ) {
                return apply_appearance(&mut self.target_appearance, key, field, value);
            }
        }

        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "image_h" => self.image_h = parse_value(key, value)?,
            "image_w" => self.image_w = parse_value(key, value)?,
            "num_sources" => {} // handled in the first pass
            "images_per_source" => self.images_per_source = parse_value(key, value)?,
            "target_images" => self.target_images = parse_value(key, value)?,
            "horizon_frac" => self.horizon_frac = parse_value(key, value)?,
            "vehicle_min" => self.vehicle_min = parse_value(key, value)?,
            "vehicle_max" => self.vehicle_max = parse_value(key, value)?,
            "building_prob" => self.building_prob = parse_value(key, value)?,
            "rig_twin" => self.rig_twin = parse_value(key, value)?,
            "open_inject_prob" => self.open_inject_prob = parse_value(key, value)?,
            "open_perturb" => self.open_perturb = parse_value(key, value)?,
            "open_similar_class" => self.open_similar_class = parse_value(key, value)?,
            "epochs_per_round" => self.epochs_per_round = parse_value(key, value)?,
            "max_rounds" => self.max_rounds = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lambda_sup" => self.lambda_sup = parse_value(key, value)?,
            "lambda_unsup" => self.lambda_unsup = parse_value(key, value)?,
            "lambda_distil" => self.lambda_distil = parse_value(key, value)?,
            "lambda_adv" => self.lambda_adv = parse_value(key, value)?,
            "gan" => self.gan = value.parse().map_err(|e| anyhow!("{e}"))?,
            "beta" => self.beta = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "tau_fraction" => self.tau_fraction = parse_value(key, value)?,
            "kl_kappa" => self.kl_kappa = parse_value(key, value)?,
            "retrain_after_boundless" => {
                self.retrain_after_boundless = parse_value(key, value)?
            }
            "retrain_weight" => self.retrain_weight = parse_value(key, value)?,
            "retrain_epochs" => self.retrain_epochs = parse_value(key, value)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.rig_twin >= self.num_sources as i64 {
            bail!("rig_twin {} out of range", self.rig_twin);
        }
        if self.images_per_source == 0 || self.target_images == 0 {
            bail!("images_per_source and target_images must be at least 1");
        }
        self.loss_weights()?;
        self.train_config().validate()?;
        self.open_set_spec()?;
        Ok(())
    }

    /// Stable full-precision echo; parses back to an identical config.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# resolved run configuration");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("image_h", self.image_h.to_string());
        kv("image_w", self.image_w.to_string());
        kv("num_sources", self.num_sources.to_string());
        kv("images_per_source", self.images_per_source.to_string());
        kv("target_images", self.target_images.to_string());
        kv("horizon_frac", self.horizon_frac.to_string());
        kv("vehicle_min", self.vehicle_min.to_string());
        kv("vehicle_max", self.vehicle_max.to_string());
        kv("building_prob", self.building_prob.to_string());
        kv("rig_twin", self.rig_twin.to_string());
        for (i, a) in self.source_appearance.iter().enumerate() {
            kv(&format!("source{i}_brightness"), a.brightness.to_string());
            kv(&format!("source{i}_noise_sigma"), a.noise_sigma.to_string());
            kv(&format!("source{i}_stripe_period"), a.stripe_period.to_string());
            kv(&format!("source{i}_color_shift"), a.color_shift.to_string());
        }
        let t = &self.target_appearance;
        kv("target_brightness", t.brightness.to_string());
        kv("target_noise_sigma", t.noise_sigma.to_string());
        kv("target_stripe_period", t.stripe_period.to_string());
        kv("target_color_shift", t.color_shift.to_string());
        kv("open_inject_prob", self.open_inject_prob.to_string());
        kv("open_perturb", self.open_perturb.to_string());
        kv("open_similar_class", self.open_similar_class.to_string());
        kv("epochs_per_round", self.epochs_per_round.to_string());
        kv("max_rounds", self.max_rounds.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lambda_sup", self.lambda_sup.to_string());
        kv("lambda_unsup", self.lambda_unsup.to_string());
        kv("lambda_distil", self.lambda_distil.to_string());
        kv("lambda_adv", self.lambda_adv.to_string());
        kv(
            "gan",
            match self.gan {
                GanKind::Vanilla => "vanilla".into(),
                GanKind::LeastSquares => "lsgan".into(),
            },
        );
        kv("beta", self.beta.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("tau_fraction", self.tau_fraction.to_string());
        kv("kl_kappa", self.kl_kappa.to_string());
        kv(
            "retrain_after_boundless",
            self.retrain_after_boundless.to_string(),
        );
        kv("retrain_weight", self.retrain_weight.to_string());
        kv("retrain_epochs", self.retrain_epochs.to_string());
        out
    }

    pub fn num_closed(&self) -> usize {
        default_palette().len()
    }

    pub fn open_id(&self) -> u8 {
        self.num_closed() as u8
    }

    pub fn scene_config(&self, domain: DomainKind) -> SceneConfig {
        let appearance = match domain {
            DomainKind::Target => self.target_appearance,
            DomainKind::Source(i) => {
                if self.rig_twin == i as i64 {
                    self.target_appearance
                } else {
                    self.source_appearance[i]
                }
            }
        };
        SceneConfig {
            height: self.image_h,
            width: self.image_w,
            base_colors: default_palette(),
            appearance,
            open_set: OpenSetParams {
                open_id: self.open_id(),
                similar_class: self.open_similar_class,
                perturb: self.open_perturb,
                inject_prob: self.open_inject_prob,
            },
            horizon_frac: self.horizon_frac,
            vehicle_count: (self.vehicle_min, self.vehicle_max),
            building_prob: self.building_prob,
            seed: self.seed,
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights<Real>> {
        LossWeights::new(self.lambda_sup, self.lambda_unsup, self.lambda_distil)
            .map_err(|e| anyhow!("{e}"))
    }

    pub fn train_config(&self) -> TrainConfig<Real> {
        TrainConfig {
            seed: self.seed,
            epochs_per_round: self.epochs_per_round,
            max_rounds: self.max_rounds,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            loss_weights: LossWeights::new(self.lambda_sup, self.lambda_unsup, self.lambda_distil)
                .expect("lambdas validated at parse time"),
            lambda_adv: self.lambda_adv,
            gan_kind: self.gan,
            beta: self.beta,
            epsilon: self.epsilon,
            tau_fraction: self.tau_fraction,
        }
    }

    pub fn open_set_spec(&self) -> Result<OpenSetSpec> {
        OpenSetSpec::new(
            self.num_closed(),
            vec![OpenClass {
                id: self.open_id(),
                similar: vec![self.open_similar_class],
            }],
        )
        .map_err(|e| anyhow!("{e}"))
    }

    /// Render palette: closed-class colors from the scene palette, magenta
    /// for the open class.
    pub fn render_palette(&self) -> Vec<[u8; 3]> {
        let mut palette: Vec<[u8; 3]> = default_palette()
            .iter()
            .map(|c| std::array::from_fn(|i| (c[i] * 255.0).round() as u8))
            .collect();
        palette.push([230, 0, 230]);
        palette
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("config key {key:?}: cannot parse {value:?} ({e})"))
}

fn apply_appearance(
    a: &mut DomainAppearance,
    key: &str,
    field: &str,
    value: &str,
) -> Result<()> {
    match field {
        "brightness" => a.brightness = parse_value(key, value)?,
        "noise_sigma" => a.noise_sigma = parse_value(key, value)?,
        "stripe_period" => a.stripe_period = parse_value(key, value)?,
        "color_shift" => a.color_shift = parse_value(key, value)?,
        _ => bail!("unknown config key {key:?}"),
    }
    Ok(())
}

/// Reads and parses a config file; `None` yields the defaults.
pub fn load(path: Option<&std::path::Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_roundtrip() {
        let cfg = RunConfig::default();
        let echoed = cfg.echo();
        let back = RunConfig::parse(&echoed).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = RunConfig::parse("foo = 3\n").unwrap_err();
        assert!(err.to_string().contains("\"foo\""), "{err}");
    }

    #[test]
    fn out_of_range_source_key_rejected() {
        let err = RunConfig::parse("num_sources = 2\nsource5_brightness = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("source5_brightness"), "{err}");
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse("# hello\n\nseed = 9 # trailing comment\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn zero_images_rejected() {
        assert!(RunConfig::parse("images_per_source = 0\n").is_err());
    }

    #[test]
    fn twin_appearance_applied() {
        let cfg = RunConfig::parse("rig_twin = 1\n").unwrap();
        let twin_scene = cfg.scene_config(DomainKind::Source(1));
        let target_scene = cfg.scene_config(DomainKind::Target);
        assert_eq!(twin_scene.appearance, target_scene.appearance);
        let other = cfg.scene_config(DomainKind::Source(0));
        assert_ne!(other.appearance, target_scene.appearance);
    }
}
