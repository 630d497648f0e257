//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use cdtsde::predictors::TrainConfig;
use cdtsde::tasks::TaskKind;
use cdtsde::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleVariant {
    Linear,
    Channel,
    Dynamic,
}

impl ScheduleVariant {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleVariant::Linear => "linear",
            ScheduleVariant::Channel => "channel",
            ScheduleVariant::Dynamic => "dynamic",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(ScheduleVariant::Linear),
            "channel" => Some(ScheduleVariant::Channel),
            "dynamic" => Some(ScheduleVariant::Dynamic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t1: usize,
    pub sampler_steps: usize,
    pub schedule_variant: ScheduleVariant,
    pub train_steps: usize,
    pub lr: f64,
    pub mixer_lr_mult: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub n_pairs: usize,
    pub image_size: usize,
    pub channels: usize,
    pub batch: usize,
}

const KEYS: [&str; 16] = [
    "task",
    "T",
    "beta_min",
    "beta_max",
    "t1",
    "sampler_steps",
    "schedule_variant",
    "train_steps",
    "lr",
    "mixer_lr_mult",
    "seed",
    "out_dir",
    "n_pairs",
    "image_size",
    "channels",
    "batch",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let train = TrainConfig::default();
        let mut task = None;
        let mut out_dir = None;
        let mut cfg = RunConfig {
            task: TaskKind::ContrastSwap,
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            t1: 0,
            sampler_steps: 20,
            schedule_variant: ScheduleVariant::Dynamic,
            train_steps: train.steps,
            lr: train.lr,
            mixer_lr_mult: train.mixer_lr_mult,
            seed: 0,
            out_dir: PathBuf::new(),
            n_pairs: 64,
            image_size: 32,
            channels: 1,
            batch: train.batch,
        };
        let mut t1 = None;
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
            }
            match key {
                "task" => {
                    task = Some(
                        TaskKind::parse(value)
                            .ok_or_else(|| Error::Config(format!("line {line}: unknown task `{value}`")))?,
                    )
                }
                "T" => cfg.steps = parse_value(key, value, line)?,
                "beta_min" => cfg.beta_min = parse_value(key, value, line)?,
                "beta_max" => cfg.beta_max = parse_value(key, value, line)?,
                "t1" => t1 = Some(parse_value(key, value, line)?),
                "sampler_steps" => cfg.sampler_steps = parse_value(key, value, line)?,
                "schedule_variant" => {
                    cfg.schedule_variant = ScheduleVariant::parse(value).ok_or_else(|| {
                        Error::Config(format!("line {line}: schedule_variant must be linear, channel or dynamic"))
                    })?
                }
                "train_steps" => cfg.train_steps = parse_value(key, value, line)?,
                "lr" => cfg.lr = parse_value(key, value, line)?,
                "mixer_lr_mult" => cfg.mixer_lr_mult = parse_value(key, value, line)?,
                "seed" => cfg.seed = parse_value(key, value, line)?,
                "out_dir" => out_dir = Some(PathBuf::from(value)),
                "n_pairs" => cfg.n_pairs = parse_value(key, value, line)?,
                "image_size" => cfg.image_size = parse_value(key, value, line)?,
                "channels" => cfg.channels = parse_value(key, value, line)?,
                "batch" => cfg.batch = parse_value(key, value, line)?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.task = task.ok_or_else(|| Error::Config("missing required key `task`".into()))?;
        cfg.out_dir = out_dir.ok_or_else(|| Error::Config("missing required key `out_dir`".into()))?;
        cfg.t1 = t1.unwrap_or(cfg.steps / 2);
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.steps < 2 {
            return fail(format!("T = {} must be at least 2", self.steps));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return fail(format!("need 0 < beta_min <= beta_max < 1, got {} and {}", self.beta_min, self.beta_max));
        }
        if self.t1 < 1 || self.t1 >= self.steps {
            return fail(format!("t1 = {} not in 1..{}", self.t1, self.steps));
        }
        if self.sampler_steps < 1 || self.sampler_steps > self.t1 {
            return fail(format!("sampler_steps = {} not in 1..={}", self.sampler_steps, self.t1));
        }
        if self.n_pairs < 1 || self.image_size < 4 || self.channels < 1 {
            return fail("n_pairs >= 1, image_size >= 4 and channels >= 1 are required".into());
        }
        if self.task == TaskKind::ShapeToMask && self.channels != 1 {
            return fail("shape_to_mask produces single-channel images".into());
        }
        let train = TrainConfig {
            steps: self.train_steps,
            lr: self.lr,
            mixer_lr_mult: self.mixer_lr_mult,
            batch: self.batch,
            ..TrainConfig::default()
        };
        train.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Every key with its resolved value, in the canonical order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("task", self.task.name().to_string());
        put("T", self.steps.to_string());
        put("beta_min", self.beta_min.to_string());
        put("beta_max", self.beta_max.to_string());
        put("t1", self.t1.to_string());
        put("sampler_steps", self.sampler_steps.to_string());
        put("schedule_variant", self.schedule_variant.name().to_string());
        put("train_steps", self.train_steps.to_string());
        put("lr", self.lr.to_string());
        put("mixer_lr_mult", self.mixer_lr_mult.to_string());
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("n_pairs", self.n_pairs.to_string());
        put("image_size", self.image_size.to_string());
        put("channels", self.channels.to_string());
        put("batch", self.batch.to_string());
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            lr: self.lr,
            mixer_lr_mult: self.mixer_lr_mult,
            batch: self.batch,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::parse("task = shape_to_mask\nout_dir = /tmp/x\n").unwrap();
        assert_eq!(cfg.steps, 1000);
        assert_eq!(cfg.t1, 500);
        assert_eq!(cfg.schedule_variant, ScheduleVariant::Dynamic);
        assert_eq!(cfg.mixer_lr_mult, 10.0);
    }

    #[test]
    fn render_round_trips() {
        let text = "task = contrast_swap # comment\n\nout_dir = out\nT = 200\nlr = 0.01\nschedule_variant = channel\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.t1, 100);
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "out_dir = x\n",
            "task = contrast_swap\n",
            "task = contrast_swap\nout_dir = x\ncolour = red\n",
            "task = contrast_swap\nout_dir = x\nT = 10\nT = 20\n",
            "task = contrast_swap\nout_dir = x\nlr = fast\n",
            "task = contrast_swap\nout_dir = x\nt1 = 1000\n",
            "task = contrast_swap\nout_dir = x\nschedule_variant = cubic\n",
            "task = mystery\nout_dir = x\n",
            "task contrast_swap\n",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text:?}");
        }
    }
}
