//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers. Blank lines and text after `#` are ignored; unknown sections
//! and keys are errors.
//!
//! ```text
//! seed = 0
//! [data]      format, train, test, classes, height, width, channels, ...
//! [network]   class_beta, global_beta, and their *_trainable flags
//! [layer.1]   kind, weighted, channels, field, stride, pad, whiten, order, pool_*
//! [train]     batch_size, momentum, weight_decay, lr, lr_steps, epochs, ...
//! [pretrain]  patch_cap, subsample, whitening, shape, em_iters, em_tolerance
//! [output]    checkpoint, metrics, report
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use simnet_core::network::{Architecture, LayerArch, NetworkSpec, PoolArch};
use simnet_core::pretrain::{EmOptions, PretrainOptions, ShapeMode, WhiteningMode};
use simnet_core::similarity::SimilarityKind;
use simnet_core::training::{Augmentation, TrainConfig};

use crate::data::{DataConfig, DataFormat, SyntheticTask};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub class_beta: f64,
    pub class_beta_trainable: bool,
    pub global_beta: f64,
    pub global_beta_trainable: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            class_beta: 1.0,
            class_beta_trainable: true,
            global_beta: 1.0,
            global_beta_trainable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: "simnet.ckpt".into(),
            metrics: "metrics.tsv".into(),
            report: "pretrain_report.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds initialization, pre-training and training.
    pub seed: u64,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub layers: Vec<LayerArch>,
    /// `seed` is ignored in favor of the run seed.
    pub train: TrainConfig,
    /// `seed` is ignored in favor of the run seed.
    pub pretrain: PretrainOptions,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            layers: vec![],
            train: TrainConfig::default(),
            pretrain: PretrainOptions::default(),
            output: OutputConfig::default(),
        }
    }
}

fn default_layer() -> LayerArch {
    LayerArch {
        whiten_dims: None,
        ..LayerArch::lp(8, 3, 1)
    }
}

impl RunConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dims: self.data.dims,
            layers: self.layers.clone(),
            classes: self.data.effective_classes(),
            class_beta: self.network.class_beta,
            class_beta_trainable: self.network.class_beta_trainable,
            global_beta: self.network.global_beta,
            global_beta_trainable: self.network.global_beta_trainable,
        }
    }

    /// Randomly initialized network under the run seed.
    pub fn build_network(&self) -> Result<NetworkSpec> {
        Ok(self.architecture().build(self.seed)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    /// Checks that the configuration describes a buildable network and a
    /// valid training setup.
    pub fn validate(&self) -> Result<()> {
        self.build_network().context("network section")?;
        self.train_config().validate().context("train section")?;
        if self.data.format == DataFormat::Synthetic && self.data.synthetic_count == 0 {
            bail!("synthetic_count must be positive");
        }
        if let Some(bad) = self.data.select_classes.iter().find(|&&c| c >= self.data.classes) {
            bail!("select_classes names class {bad}, but there are {}", self.data.classes);
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<(String, usize, BTreeMap<String, (usize, String)>)> = vec![("".into(), 0, BTreeMap::new())];
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {n}: unterminated section header"))?
                    .trim();
                if sections.iter().any(|(s, _, _)| s == name) {
                    bail!("line {n}: section [{name}] appears twice");
                }
                sections.push((name.to_string(), n, BTreeMap::new()));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {n}: expected `key = value`, got {line:?}"))?;
            let (k, v) = (k.trim(), v.trim());
            let table = &mut sections.last_mut().expect("root section").2;
            if table.insert(k.to_string(), (n, v.to_string())).is_some() {
                bail!("line {n}: key {k:?} repeated");
            }
        }

        let mut cfg = RunConfig::default();
        let mut layers: BTreeMap<usize, LayerArch> = BTreeMap::new();
        for (name, line, table) in sections {
            let mut t = Table { section: name.clone(), entries: table };
            match name.as_str() {
                "" => t.get("seed", &mut cfg.seed)?,
                "data" => parse_data(&mut t, &mut cfg.data)?,
                "network" => {
                    let n = &mut cfg.network;
                    t.get("class_beta", &mut n.class_beta)?;
                    t.get("class_beta_trainable", &mut n.class_beta_trainable)?;
                    t.get("global_beta", &mut n.global_beta)?;
                    t.get("global_beta_trainable", &mut n.global_beta_trainable)?;
                }
                "train" => parse_train(&mut t, &mut cfg.train)?,
                "pretrain" => parse_pretrain(&mut t, &mut cfg.pretrain)?,
                "output" => {
                    let o = &mut cfg.output;
                    t.get_with("checkpoint", &mut o.checkpoint, |s| Ok(PathBuf::from(s)))?;
                    t.get_with("metrics", &mut o.metrics, |s| Ok(PathBuf::from(s)))?;
                    t.get_with("report", &mut o.report, |s| Ok(PathBuf::from(s)))?;
                }
                other => {
                    let idx = other
                        .strip_prefix("layer.")
                        .and_then(|s| s.parse::<usize>().ok())
                        .filter(|&i| i >= 1)
                        .ok_or_else(|| anyhow!("line {line}: unknown section [{other}]"))?;
                    let mut layer = default_layer();
                    parse_layer(&mut t, &mut layer)?;
                    layers.insert(idx, layer);
                }
            }
            t.finish()?;
        }
        for (pos, (&idx, _)) in layers.iter().enumerate() {
            if idx != pos + 1 {
                bail!("layer sections must be numbered 1, 2, ... without gaps; found [layer.{idx}]");
            }
        }
        cfg.layers = layers.into_values().collect();
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut out = format!("seed = {}\n", self.seed);
        let d = &self.data;
        let paths = |p: &[PathBuf]| {
            if p.is_empty() {
                "none".to_string()
            } else {
                p.iter().map(|x| x.display().to_string()).collect::<Vec<_>>().join(", ")
            }
        };
        let mut sections: Vec<(String, Vec<(&str, String)>)> = vec![(
            "data".into(),
            vec![
                ("format", d.format.name().into()),
                ("train", paths(&d.train)),
                ("test", paths(&d.test)),
                ("classes", d.classes.to_string()),
                ("height", d.dims.0.to_string()),
                ("width", d.dims.1.to_string()),
                ("channels", d.dims.2.to_string()),
                ("select_classes", list(&d.select_classes)),
                ("limit", d.limit.to_string()),
                ("mean_subtraction", d.mean_subtraction.to_string()),
                ("synthetic_task", d.synthetic_task.name().into()),
                ("synthetic_count", d.synthetic_count.to_string()),
                ("synthetic_seed", d.synthetic_seed.to_string()),
            ],
        )];
        let n = &self.network;
        sections.push((
            "network".into(),
            vec![
                ("class_beta", float(n.class_beta)),
                ("class_beta_trainable", n.class_beta_trainable.to_string()),
                ("global_beta", float(n.global_beta)),
                ("global_beta_trainable", n.global_beta_trainable.to_string()),
            ],
        ));
        for (i, l) in self.layers.iter().enumerate() {
            let pool = l.pool.unwrap_or(PoolArch {
                window: 0,
                stride: 0,
                beta: 1.0,
                beta_trainable: false,
            });
            sections.push((
                format!("layer.{}", i + 1),
                vec![
                    ("kind", kind_name(l.kind).into()),
                    ("weighted", l.weighted.to_string()),
                    ("channels", l.channels.to_string()),
                    ("field", l.field.to_string()),
                    ("stride", l.stride.to_string()),
                    ("pad", l.pad.to_string()),
                    ("whiten", l.whiten_dims.map_or("none".into(), |w| w.to_string())),
                    ("order", float(l.order_p)),
                    ("order_trainable", l.order_trainable.to_string()),
                    ("whiten_trainable", l.whiten_trainable.to_string()),
                    ("pool_window", pool.window.to_string()),
                    ("pool_stride", pool.stride.to_string()),
                    ("pool_beta", float(pool.beta)),
                    ("pool_beta_trainable", pool.beta_trainable.to_string()),
                ],
            ));
        }
        let t = &self.train;
        let steps = if t.lr_steps.is_empty() {
            "none".to_string()
        } else {
            t.lr_steps.iter().map(|(e, m)| format!("{e}:{}", float(*m))).collect::<Vec<_>>().join(", ")
        };
        sections.push((
            "train".into(),
            vec![
                ("batch_size", t.batch_size.to_string()),
                ("momentum", float(t.momentum)),
                ("weight_decay", float(t.weight_decay)),
                ("lr", float(t.lr)),
                ("lr_steps", steps),
                ("epochs", t.epochs.to_string()),
                ("noise_std", float(t.noise_std)),
                (
                    "augmentation",
                    match t.augmentation {
                        Augmentation::None => "none",
                        Augmentation::Hflip => "hflip",
                    }
                    .into(),
                ),
            ],
        ));
        let p = &self.pretrain;
        sections.push((
            "pretrain".into(),
            vec![
                ("patch_cap", p.patch_cap.to_string()),
                ("subsample", p.subsample.to_string()),
                (
                    "whitening",
                    match p.whitening {
                        WhiteningMode::Pca => "pca",
                        WhiteningMode::Ica => "ica",
                    }
                    .into(),
                ),
                (
                    "shape",
                    match p.shape {
                        ShapeMode::Learned => "learned".into(),
                        ShapeMode::Fixed(b) => float(b),
                    },
                ),
                ("em_iters", p.em.max_iters.to_string()),
                ("em_tolerance", p.em.tolerance.map_or("none".into(), float)),
                ("em_seed", p.em.seed.to_string()),
            ],
        ));
        let o = &self.output;
        sections.push((
            "output".into(),
            vec![
                ("checkpoint", o.checkpoint.display().to_string()),
                ("metrics", o.metrics.display().to_string()),
                ("report", o.report.display().to_string()),
            ],
        ));
        for (name, entries) in sections {
            let _ = writeln!(out, "\n[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

/// Shortest representation that parses back to the same `f64`.
fn float(v: f64) -> String {
    format!("{v:?}")
}

fn list(v: &[usize]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
    }
}

fn kind_name(k: SimilarityKind) -> &'static str {
    match k {
        SimilarityKind::Lp => "lp",
        SimilarityKind::Linear => "linear",
    }
}

struct Table {
    section: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl Table {
    fn get_with<T>(&mut self, key: &str, dst: &mut T, parse: impl FnOnce(&str) -> Result<T>) -> Result<()> {
        if let Some((line, v)) = self.entries.remove(key) {
            *dst = parse(&v).with_context(|| format!("line {line}: {key} = {v}"))?;
        }
        Ok(())
    }

    fn get<T: FromStr>(&mut self, key: &str, dst: &mut T) -> Result<()>
    where
        T::Err: std::error::Error + Send + Sync + 'static,
    {
        self.get_with(key, dst, |s| Ok(s.parse::<T>()?))
    }

    fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.entries.into_iter().next() {
            let section = if self.section.is_empty() { "top level".into() } else { format!("[{}]", self.section) };
            bail!("line {line}: unknown key {k:?} in {section}");
        }
        Ok(())
    }
}

fn none_or<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if s == "none" || s.is_empty() {
        return Ok(vec![]);
    }
    s.split(',').map(|x| f(x.trim())).collect()
}

fn parse_data(t: &mut Table, d: &mut DataConfig) -> Result<()> {
    t.get_with("format", &mut d.format, DataFormat::parse)?;
    t.get_with("train", &mut d.train, |s| none_or(s, |x| Ok(PathBuf::from(x))))?;
    t.get_with("test", &mut d.test, |s| none_or(s, |x| Ok(PathBuf::from(x))))?;
    t.get("classes", &mut d.classes)?;
    t.get("height", &mut d.dims.0)?;
    t.get("width", &mut d.dims.1)?;
    t.get("channels", &mut d.dims.2)?;
    t.get_with("select_classes", &mut d.select_classes, |s| none_or(s, |x| Ok(x.parse()?)))?;
    t.get("limit", &mut d.limit)?;
    t.get("mean_subtraction", &mut d.mean_subtraction)?;
    t.get_with("synthetic_task", &mut d.synthetic_task, SyntheticTask::parse)?;
    t.get("synthetic_count", &mut d.synthetic_count)?;
    t.get("synthetic_seed", &mut d.synthetic_seed)
}

fn parse_layer(t: &mut Table, l: &mut LayerArch) -> Result<()> {
    t.get_with("kind", &mut l.kind, |s| match s {
        "lp" => Ok(SimilarityKind::Lp),
        "linear" => Ok(SimilarityKind::Linear),
        other => bail!("unknown similarity kind {other:?} (lp, linear)"),
    })?;
    t.get("weighted", &mut l.weighted)?;
    t.get("channels", &mut l.channels)?;
    t.get("field", &mut l.field)?;
    t.get("stride", &mut l.stride)?;
    t.get("pad", &mut l.pad)?;
    t.get_with("whiten", &mut l.whiten_dims, |s| {
        Ok(if s == "none" { None } else { Some(s.parse()?) })
    })?;
    t.get("order", &mut l.order_p)?;
    t.get("order_trainable", &mut l.order_trainable)?;
    t.get("whiten_trainable", &mut l.whiten_trainable)?;
    let mut pool = PoolArch {
        window: 0,
        stride: 0,
        beta: 1.0,
        beta_trainable: false,
    };
    t.get("pool_window", &mut pool.window)?;
    t.get("pool_stride", &mut pool.stride)?;
    t.get("pool_beta", &mut pool.beta)?;
    t.get("pool_beta_trainable", &mut pool.beta_trainable)?;
    if pool.window > 0 {
        if pool.stride == 0 {
            pool.stride = pool.window;
        }
        l.pool = Some(pool);
    } else {
        l.pool = None;
    }
    Ok(())
}

fn parse_train(t: &mut Table, c: &mut TrainConfig) -> Result<()> {
    t.get("batch_size", &mut c.batch_size)?;
    t.get("momentum", &mut c.momentum)?;
    t.get("weight_decay", &mut c.weight_decay)?;
    t.get("lr", &mut c.lr)?;
    t.get_with("lr_steps", &mut c.lr_steps, |s| {
        none_or(s, |x| {
            let (e, m) = x.split_once(':').ok_or_else(|| anyhow!("expected epoch:multiplier, got {x:?}"))?;
            Ok((e.trim().parse()?, m.trim().parse()?))
        })
    })?;
    t.get("epochs", &mut c.epochs)?;
    t.get("noise_std", &mut c.noise_std)?;
    t.get_with("augmentation", &mut c.augmentation, |s| match s {
        "none" => Ok(Augmentation::None),
        "hflip" => Ok(Augmentation::Hflip),
        other => bail!("unknown augmentation {other:?} (none, hflip)"),
    })
}

fn parse_pretrain(t: &mut Table, p: &mut PretrainOptions) -> Result<()> {
    t.get("patch_cap", &mut p.patch_cap)?;
    t.get("subsample", &mut p.subsample)?;
    t.get_with("whitening", &mut p.whitening, |s| match s {
        "pca" => Ok(WhiteningMode::Pca),
        "ica" => Ok(WhiteningMode::Ica),
        other => bail!("unknown whitening {other:?} (pca, ica)"),
    })?;
    t.get_with("shape", &mut p.shape, |s| {
        Ok(if s == "learned" { ShapeMode::Learned } else { ShapeMode::Fixed(s.parse()?) })
    })?;
    let em: &mut EmOptions = &mut p.em;
    t.get("em_iters", &mut em.max_iters)?;
    t.get_with("em_tolerance", &mut em.tolerance, |s| {
        Ok(if s == "none" { None } else { Some(s.parse()?) })
    })?;
    t.get("em_seed", &mut em.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
seed = 4   # run seed

[data]
format = cifar_binary
train = a.bin, b.bin
test = t.bin
classes = 10
height = 32
width = 32
channels = 3
select_classes = 3, 5
limit = 2000
mean_subtraction = true

[network]
class_beta = 0.5

[layer.1]
channels = 8
field = 5
whiten = 12
pool_window = 3
pool_stride = 2
pool_beta = 60

[layer.2]
kind = linear
weighted = false
channels = 16
field = 5

[train]
lr = 0.02
lr_steps = 30:0.1
epochs = 50
augmentation = none

[pretrain]
shape = 2.0
em_tolerance = none
";

    #[test]
    fn parses_a_full_file() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.data.train.len(), 2);
        assert_eq!(cfg.data.select_classes, [3, 5]);
        assert_eq!(cfg.layers.len(), 2);
        assert_eq!(cfg.layers[0].whiten_dims, Some(12));
        assert_eq!(cfg.layers[0].pool.unwrap().window, 3);
        assert_eq!(cfg.layers[1].kind, SimilarityKind::Linear);
        assert_eq!(cfg.train.lr_steps, [(30, 0.1)]);
        assert_eq!(cfg.pretrain.shape, ShapeMode::Fixed(2.0));
        assert_eq!(cfg.pretrain.em.tolerance, None);
        let arch = cfg.architecture();
        assert_eq!(arch.classes, 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.serialize(), text);
        let default = RunConfig::default();
        assert_eq!(RunConfig::parse(&default.serialize()).unwrap(), default);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("[data]\nformat = cifar_binary\ncolour = red\n").unwrap_err();
        assert!(e.to_string().contains("line 3") && e.to_string().contains("colour"), "{e}");
        let e = RunConfig::parse("[model]\n").unwrap_err();
        assert!(e.to_string().contains("unknown section"), "{e}");
        assert!(RunConfig::parse("[train]\nlr = fast\n").is_err());
        assert!(RunConfig::parse("[train]\nlr = 1\nlr = 2\n").is_err());
        assert!(RunConfig::parse("[layer.2]\nchannels = 3\n").is_err());
        assert!(RunConfig::parse("seed 3\n").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::parse(SAMPLE).unwrap();
        cfg.data.select_classes = vec![11];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::parse(SAMPLE).unwrap();
        cfg.layers[1].field = 40;
        assert!(cfg.validate().is_err());
    }
}
