//! Plain-text run configuration: UTF-8 `key = value` lines, `#` comments,
//! `[section]` headers. The same format carries the scene manifest
//! (repeated `scene = <stem> <role>` lines) and the effective-config echo
//! written next to every training run, which re-parses to the identical
//! run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{ArchSpec, Upsampler, Variant};
use crate::data::{Role, SyntheticConfig};
use crate::error::Error;
use crate::train::{InitMode, TrainConfig};
use crate::Result;

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

/// One parsed config file: ordered entries per section.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    path: PathBuf,
    sections: Vec<(String, Vec<Entry>)>,
}

pub fn parse_config(text: &str, path: &Path) -> Result<ConfigFile> {
    let mut cfg = ConfigFile { path: path.to_path_buf(), sections: Vec::new() };
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Config { path: path.display().to_string(), line, msg };
        if let Some(name) = stripped.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| fail("unterminated section header".into()))?
                .trim();
            if name.is_empty() {
                return Err(fail("empty section name".into()));
            }
            current = name.to_string();
            if !cfg.sections.iter().any(|(s, _)| s == &current) {
                cfg.sections.push((current.clone(), Vec::new()));
            }
            continue;
        }
        let (key, value) = stripped
            .split_once('=')
            .ok_or_else(|| fail(format!("expected `key = value`, got '{stripped}'")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(fail("empty key".into()));
        }
        if current.is_empty() {
            return Err(fail(format!("key '{key}' appears before any [section] header")));
        }
        let section = cfg
            .sections
            .iter_mut()
            .find(|(s, _)| s == &current)
            .expect("section registered above");
        section.1.push(Entry { key: key.to_string(), value: value.to_string(), line });
    }
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ConfigFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

impl ConfigFile {
    fn entries<'a>(&'a self, section: &str) -> impl Iterator<Item = &'a Entry> + 'a {
        let section = section.to_string();
        self.sections
            .iter()
            .filter(move |(s, _)| *s == section)
            .flat_map(|(_, es)| es.iter())
    }

    /// Last value wins for scalar keys.
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries(section)
            .filter(|e| e.key == key)
            .last()
            .map(|e| e.value.as_str())
    }

    /// Every occurrence, for repeatable keys like `scene`.
    pub fn get_all(&self, section: &str, key: &str) -> Vec<(&str, usize)> {
        self.entries(section)
            .filter(|e| e.key == key)
            .map(|e| (e.value.as_str(), e.line))
            .collect()
    }

    fn err(&self, line: usize, msg: String) -> Error {
        Error::Config { path: self.path.display().to_string(), line, msg }
    }

    /// Parses `section.key` with FromStr, keeping the default when absent.
    pub fn field<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.entries(section).filter(|e| e.key == key).last() {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|_| {
                self.err(
                    e.line,
                    format!("cannot parse [{section}] {key} = '{}'", e.value),
                )
            }),
        }
    }

    /// Like `field` but through a fallible converter, for enum-like keys.
    pub fn field_with<T>(
        &self,
        section: &str,
        key: &str,
        default: T,
        parse: impl Fn(&str) -> Result<T>,
    ) -> Result<T> {
        match self.entries(section).filter(|e| e.key == key).last() {
            None => Ok(default),
            Some(e) => parse(&e.value).map_err(|err| self.err(e.line, err.to_string())),
        }
    }

    pub fn bool_field(&self, section: &str, key: &str, default: Option<bool>) -> Result<Option<bool>> {
        match self.entries(section).filter(|e| e.key == key).last() {
            None => Ok(default),
            Some(e) => match e.value.as_str() {
                "on" | "true" | "1" | "yes" => Ok(Some(true)),
                "off" | "false" | "0" | "no" => Ok(Some(false)),
                other => Err(self.err(
                    e.line,
                    format!("[{section}] {key} = '{other}' is not a boolean (use on/off)"),
                )),
            },
        }
    }

    /// Rejects unknown keys so typos fail loudly with their line number.
    pub fn ensure_known(&self, section: &str, allowed: &[&str]) -> Result<()> {
        for e in self.entries(section) {
            if !allowed.contains(&e.key.as_str()) {
                return Err(self.err(
                    e.line,
                    format!("unknown key '{}' in [{section}]", e.key),
                ));
            }
        }
        Ok(())
    }

    pub fn section_names(&self) -> Vec<&str> {
        self.sections.iter().map(|(s, _)| s.as_str()).collect()
    }
}

const ARCH_KEYS: &[&str] = &[
    "variant",
    "patch_m",
    "classes",
    "bottleneck_hw",
    "extra_conv_layers",
    "upsampler",
];
const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "momentum",
    "batch_size",
    "max_epochs",
    "weight_decay",
    "lr_step_epochs",
    "lr_factor",
    "early_stopping",
    "seed",
    "train_patches",
    "val_patches",
    "threads",
];
const DATA_KEYS: &[&str] = &[
    "scene",
    "pan_size",
    "sites",
    "label_fraction",
    "ms_noise",
    "pan_noise",
    "signature_overlap",
    "speckle",
];
const REUSE_KEYS: &[&str] = &["R", "init_mode", "pretrained_checkpoint"];

/// Fully merged run settings: defaults overridden by the config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub synth: SyntheticConfig,
    /// scene stems with roles, in manifest order
    pub scenes: Vec<(String, Role)>,
    /// worker threads; 1 = bit-reproducible
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            arch: ArchSpec::default(),
            train: TrainConfig::default(),
            synth: SyntheticConfig::default(),
            scenes: Vec::new(),
            threads: 1,
        }
    }
}

pub fn run_config_from(cfg: &ConfigFile) -> Result<RunConfig> {
    for section in cfg.section_names() {
        if !["arch", "train", "data", "reuse"].contains(&section) {
            return Err(Error::InvalidConfig(format!(
                "unknown section [{section}] in {}",
                cfg.path.display()
            )));
        }
    }
    cfg.ensure_known("arch", ARCH_KEYS)?;
    cfg.ensure_known("train", TRAIN_KEYS)?;
    cfg.ensure_known("data", DATA_KEYS)?;
    cfg.ensure_known("reuse", REUSE_KEYS)?;

    let mut run = RunConfig::default();

    let a = &mut run.arch;
    a.variant = cfg.field_with("arch", "variant", a.variant, Variant::parse)?;
    a.patch_m = cfg.field("arch", "patch_m", a.patch_m)?;
    a.classes = cfg.field("arch", "classes", a.classes)?;
    a.bottleneck_hw = cfg.field("arch", "bottleneck_hw", a.bottleneck_hw)?;
    a.extra_convs = cfg.field("arch", "extra_conv_layers", a.extra_convs)?;
    a.upsampler = cfg.field_with("arch", "upsampler", a.upsampler, Upsampler::parse)?;
    a.reuse_r = cfg.field("reuse", "R", a.reuse_r)?;

    let t = &mut run.train;
    t.learning_rate = cfg.field("train", "learning_rate", t.learning_rate)?;
    t.momentum = cfg.field("train", "momentum", t.momentum)?;
    t.batch_size = cfg.field("train", "batch_size", t.batch_size)?;
    t.max_epochs = cfg.field("train", "max_epochs", t.max_epochs)?;
    t.weight_decay = cfg.field("train", "weight_decay", t.weight_decay)?;
    t.lr_factor = cfg.field("train", "lr_factor", t.lr_factor)?;
    t.seed = cfg.field("train", "seed", t.seed)?;
    t.train_patches = cfg.field("train", "train_patches", t.train_patches)?;
    t.val_patches = cfg.field("train", "val_patches", t.val_patches)?;
    t.early_stopping = cfg.bool_field("train", "early_stopping", t.early_stopping)?;
    t.lr_step_epochs = cfg.field_with(
        "train",
        "lr_step_epochs",
        t.lr_step_epochs.clone(),
        |v| {
            if v.trim().is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|p| {
                    p.trim().parse::<usize>().map_err(|_| {
                        Error::InvalidConfig(format!("bad epoch list entry '{}'", p.trim()))
                    })
                })
                .collect()
        },
    )?;
    t.init_mode = cfg.field_with("reuse", "init_mode", t.init_mode, InitMode::parse)?;
    t.pretrained = match cfg.get("reuse", "pretrained_checkpoint") {
        Some(p) => Some(PathBuf::from(p)),
        None => None,
    };

    let s = &mut run.synth;
    s.pan_size = cfg.field("data", "pan_size", s.pan_size)?;
    s.sites = cfg.field("data", "sites", s.sites)?;
    s.label_fraction = cfg.field("data", "label_fraction", s.label_fraction)?;
    s.ms_noise = cfg.field("data", "ms_noise", s.ms_noise)?;
    s.pan_noise = cfg.field("data", "pan_noise", s.pan_noise)?;
    s.signature_overlap = cfg.field("data", "signature_overlap", s.signature_overlap)?;
    s.speckle = cfg.field("data", "speckle", s.speckle)?;
    s.classes = run.arch.classes;

    for (value, line) in cfg.get_all("data", "scene") {
        let mut parts = value.split_whitespace();
        let stem = parts.next().unwrap_or_default();
        let role = parts.next().unwrap_or_default();
        if stem.is_empty() || role.is_empty() || parts.next().is_some() {
            return Err(cfg.err(
                line,
                format!("scene entries take `scene = <stem> <role>`, got '{value}'"),
            ));
        }
        let role = Role::parse(role).map_err(|e| cfg.err(line, e.to_string()))?;
        run.scenes.push((stem.to_string(), role));
    }

    run.threads = cfg.field("train", "threads", run.threads)?;
    if run.threads == 0 {
        return Err(Error::InvalidConfig("threads must be at least 1".into()));
    }

    Ok(run)
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    run_config_from(&load_config(path)?)
}

/// Serializes the merged settings; parsing the result reproduces the run.
pub fn effective_config_text(run: &RunConfig) -> String {
    let mut s = String::new();
    let a = &run.arch;
    writeln!(s, "[arch]").unwrap();
    writeln!(s, "variant = {}", a.variant.as_str()).unwrap();
    writeln!(s, "patch_m = {}", a.patch_m).unwrap();
    writeln!(s, "classes = {}", a.classes).unwrap();
    writeln!(s, "bottleneck_hw = {}", a.bottleneck_hw).unwrap();
    writeln!(s, "extra_conv_layers = {}", a.extra_convs).unwrap();
    writeln!(s, "upsampler = {}", a.upsampler.as_str()).unwrap();

    let t = &run.train;
    writeln!(s, "\n[train]").unwrap();
    writeln!(s, "learning_rate = {}", t.learning_rate).unwrap();
    writeln!(s, "momentum = {}", t.momentum).unwrap();
    writeln!(s, "batch_size = {}", t.batch_size).unwrap();
    writeln!(s, "max_epochs = {}", t.max_epochs).unwrap();
    writeln!(s, "weight_decay = {}", t.weight_decay).unwrap();
    let steps: Vec<String> = t.lr_step_epochs.iter().map(|e| e.to_string()).collect();
    writeln!(s, "lr_step_epochs = {}", steps.join(",")).unwrap();
    writeln!(s, "lr_factor = {}", t.lr_factor).unwrap();
    if let Some(es) = t.early_stopping {
        writeln!(s, "early_stopping = {}", if es { "on" } else { "off" }).unwrap();
    }
    writeln!(s, "seed = {}", t.seed).unwrap();
    writeln!(s, "train_patches = {}", t.train_patches).unwrap();
    writeln!(s, "val_patches = {}", t.val_patches).unwrap();
    writeln!(s, "threads = {}", run.threads).unwrap();

    let sy = &run.synth;
    writeln!(s, "\n[data]").unwrap();
    writeln!(s, "pan_size = {}", sy.pan_size).unwrap();
    writeln!(s, "sites = {}", sy.sites).unwrap();
    writeln!(s, "label_fraction = {}", sy.label_fraction).unwrap();
    writeln!(s, "ms_noise = {}", sy.ms_noise).unwrap();
    writeln!(s, "pan_noise = {}", sy.pan_noise).unwrap();
    writeln!(s, "signature_overlap = {}", sy.signature_overlap).unwrap();
    writeln!(s, "speckle = {}", sy.speckle).unwrap();
    for (stem, role) in &run.scenes {
        writeln!(s, "scene = {} {}", stem, role.as_str()).unwrap();
    }

    writeln!(s, "\n[reuse]").unwrap();
    writeln!(s, "R = {}", a.reuse_r).unwrap();
    writeln!(s, "init_mode = {}", t.init_mode.as_str()).unwrap();
    if let Some(p) = &t.pretrained {
        writeln!(s, "pretrained_checkpoint = {}", p.display()).unwrap();
    }
    s
}

/// Manifest written next to synthesized scenes; a plain config file whose
/// [data] section lists the tiles.
pub fn manifest_text(scenes: &[(String, Role)]) -> String {
    let mut s = String::from("[data]\n");
    for (stem, role) in scenes {
        writeln!(s, "scene = {} {}", stem, role.as_str()).unwrap();
    }
    s
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, Role)>> {
    let path = path.as_ref();
    let cfg = load_config(path)?;
    cfg.ensure_known("data", DATA_KEYS)?;
    let mut scenes = Vec::new();
    for (value, line) in cfg.get_all("data", "scene") {
        let mut parts = value.split_whitespace();
        let (stem, role) = (
            parts.next().unwrap_or_default().to_string(),
            parts.next().unwrap_or_default(),
        );
        if stem.is_empty() || role.is_empty() {
            return Err(cfg.err(line, format!("bad scene entry '{value}'")));
        }
        scenes.push((stem, Role::parse(role).map_err(|e| cfg.err(line, e.to_string()))?));
    }
    if scenes.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} lists no scenes",
            path.display()
        )));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        run_config_from(&parse_config(text, Path::new("test.cfg"))?)
    }

    #[test]
    fn defaults_survive_an_empty_config() {
        let run = parse("").unwrap();
        assert_eq!(run.arch, ArchSpec::default());
        assert_eq!(run.train.learning_rate, 0.01);
        assert_eq!(run.train.momentum, 0.9);
        assert_eq!(run.train.batch_size, 32);
        assert_eq!(run.train.max_epochs, 240);
        assert_eq!(run.train.weight_decay, 0.001);
        assert_eq!(run.train.lr_step_epochs, vec![60, 180]);
        assert_eq!(run.threads, 1);
    }

    #[test]
    fn values_comments_and_sections_parse() {
        let text = "
# experiment
[arch]
variant = fusenet_skip   # trailing comment
patch_m = 8

[train]
learning_rate = 0.02
lr_step_epochs = 10, 20
early_stopping = off

[reuse]
R = 2
init_mode = map_init
pretrained_checkpoint = base.mckp

[data]
scene = tile0 train
scene = tile2 validation
speckle = 0.1
";
        let run = parse(text).unwrap();
        assert_eq!(run.arch.variant, Variant::FusenetSkip);
        assert_eq!(run.arch.patch_m, 8);
        assert_eq!(run.arch.reuse_r, 2);
        assert_eq!(run.train.learning_rate, 0.02);
        assert_eq!(run.train.lr_step_epochs, vec![10, 20]);
        assert_eq!(run.train.early_stopping, Some(false));
        assert_eq!(run.train.init_mode, InitMode::MapInit);
        assert_eq!(run.train.pretrained.as_deref(), Some(Path::new("base.mckp")));
        assert_eq!(run.synth.speckle, 0.1);
        assert_eq!(
            run.scenes,
            vec![
                ("tile0".to_string(), Role::Train),
                ("tile2".to_string(), Role::Validation)
            ]
        );
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "[train]\nlearning_rate = fast\n";
        let err = parse(bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test.cfg:2"), "{msg}");
        assert!(msg.contains("learning_rate"), "{msg}");

        let unknown = "[train]\nlerning_rate = 0.1\n";
        let err = parse(unknown).unwrap_err().to_string();
        assert!(err.contains("test.cfg:2") && err.contains("lerning_rate"), "{err}");

        let no_section = "threads = 2\n";
        let err = parse(no_section).unwrap_err().to_string();
        assert!(err.contains("test.cfg:1"), "{err}");

        let bad_scene = "[data]\nscene = onlystem\n";
        let err = parse(bad_scene).unwrap_err().to_string();
        assert!(err.contains("test.cfg:2"), "{err}");
    }

    #[test]
    fn last_value_wins_for_scalars() {
        let run = parse("[train]\nseed = 1\nseed = 2\n").unwrap();
        assert_eq!(run.train.seed, 2);
    }

    #[test]
    fn effective_config_round_trips() {
        let text = "
[arch]
variant = fusenet_high
patch_m = 8
classes = 4

[train]
seed = 99
threads = 3
early_stopping = on

[data]
scene = a train
scene = b validation
scene = c test
label_fraction = 0.2

[reuse]
R = 1
";
        let run = parse(text).unwrap();
        let echoed = effective_config_text(&run);
        let again = parse(&echoed).unwrap();
        assert_eq!(again.arch, run.arch);
        assert_eq!(again.scenes, run.scenes);
        assert_eq!(again.threads, run.threads);
        assert_eq!(again.train.seed, run.train.seed);
        assert_eq!(again.train.early_stopping, run.train.early_stopping);
        assert_eq!(again.synth.label_fraction, run.synth.label_fraction);
        assert_eq!(effective_config_text(&again), echoed);
    }

    #[test]
    fn manifest_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.cfg");
        let scenes = vec![
            ("tile0".to_string(), Role::Train),
            ("tile1".to_string(), Role::Test),
        ];
        std::fs::write(&path, manifest_text(&scenes)).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), scenes);
    }
}
