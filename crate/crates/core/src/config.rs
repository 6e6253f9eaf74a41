//! Pipeline configuration file and its validation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::{BinEdges, Smoothing};
use crate::linker::Normalization;
use crate::noise::{BudgetUnit, NoiseParams, Objective};
use crate::sampler::Mode;

/// A field-level configuration problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub kb: PathBuf,
    pub vocab: PathBuf,
    /// Monolingual documents (JSON lines).
    pub mono: PathBuf,
    /// Parallel finetuning data (JSON lines `{"src", "tgt"}`).
    pub finetune: PathBuf,
    /// Parallel test data; `tgt` is the reference.
    pub test: PathBuf,
    /// System output, one tokenized sentence per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyp: Option<PathBuf>,
    /// Output of a second system to compare against in the gain matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_hyp: Option<PathBuf>,
    /// Ground truth sidecar from `synth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    /// `id<TAB>lang<TAB>form` input for `build-kb`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kb_tsv: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Languages {
    /// Language of the translation source; entity replacements use it.
    pub src: String,
    /// Language of the monolingual text and translation target.
    pub tgt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub lambda: f64,
    pub mask_ratio: f64,
    pub permute_prob: f64,
    pub budget_unit: BudgetUnit,
    pub attempt_factor: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let p = NoiseParams::default();
        NoiseConfig {
            lambda: p.lambda,
            mask_ratio: p.mask_ratio,
            permute_prob: p.permute_prob,
            budget_unit: p.budget_unit,
            attempt_factor: p.attempt_factor,
        }
    }
}

impl NoiseConfig {
    pub fn params(&self, seed: u64) -> NoiseParams {
        NoiseParams {
            lambda: self.lambda,
            mask_ratio: self.mask_ratio,
            permute_prob: self.permute_prob,
            seed,
            budget_unit: self.budget_unit,
            attempt_factor: self.attempt_factor,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkerConfig {
    pub policy: Normalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: Mode,
    pub objective: Objective,
    pub epochs: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: Mode::Multitask,
            objective: Objective::Deep,
            epochs: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bin_edges: BinEdges,
    pub smoothing: Smoothing,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Required; there is no time-based default.
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    pub paths: Paths,
    pub languages: Languages,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub linker: LinkerConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn field_of(message: &str) -> Option<String> {
    for marker in ["missing field `", "unknown field `"] {
        if let Some(rest) = message.split(marker).nth(1) {
            return rest.split('`').next().map(str::to_string);
        }
    }
    None
}

impl PipelineConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, Vec<Diagnostic>> {
        match toml::from_str::<PipelineConfig>(text) {
            Ok(mut cfg) => {
                cfg.base_dir = base_dir.to_path_buf();
                Ok(cfg)
            }
            Err(e) => {
                let message = e.message().to_string();
                let field = field_of(&message).unwrap_or_else(|| "<config>".to_string());
                Err(vec![Diagnostic::new(field, message)])
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, Vec<Diagnostic>> {
        let text = fs::read_to_string(path)
            .map_err(|e| vec![Diagnostic::new("<config>", format!("{}: {e}", path.display()))])?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.resolve(&self.paths.output_dir).join(name)
    }

    pub fn noise_params(&self) -> NoiseParams {
        self.noise.params(self.seed)
    }
}

/// Inputs a stage reads from `paths`.
fn required_inputs(stage: Option<&str>) -> &'static [&'static str] {
    match stage {
        None => &["kb", "vocab", "mono", "finetune", "test"],
        Some("build-kb") => &["kb_tsv"],
        Some("synth") => &[],
        Some("link") => &["kb", "mono"],
        Some("pack") => &["vocab", "mono"],
        Some("noise") => &["kb"],
        Some("emit") => &[],
        Some("sample") => &["kb", "vocab", "finetune"],
        Some("eval") => &["kb", "test", "hyp"],
        Some("stats") => &["kb", "finetune", "test"],
        Some(_) => &[],
    }
}

fn path_field<'a>(paths: &'a Paths, name: &str) -> Option<&'a PathBuf> {
    match name {
        "kb" => Some(&paths.kb),
        "vocab" => Some(&paths.vocab),
        "mono" => Some(&paths.mono),
        "finetune" => Some(&paths.finetune),
        "test" => Some(&paths.test),
        "hyp" => paths.hyp.as_ref(),
        "baseline_hyp" => paths.baseline_hyp.as_ref(),
        "truth" => paths.truth.as_ref(),
        "kb_tsv" => paths.kb_tsv.as_ref(),
        _ => None,
    }
}

/// Diagnostics for the whole pipeline; empty iff the config is runnable.
pub fn validate(config: &PipelineConfig) -> Vec<Diagnostic> {
    validate_stage(config, None)
}

/// Like [`validate`], but only checks the inputs `stage` reads.
pub fn validate_stage(config: &PipelineConfig, stage: Option<&str>) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for (field, msg) in config.noise_params().problems() {
        out.push(Diagnostic::new(format!("noise.{field}"), msg));
    }
    if config.workers == 0 {
        out.push(Diagnostic::new("workers", "workers must be at least 1"));
    }
    if config.sampler.epochs == 0 {
        out.push(Diagnostic::new("sampler.epochs", "epochs must be at least 1"));
    }
    if config.languages.src.is_empty() {
        out.push(Diagnostic::new("languages.src", "language code must be non-empty"));
    }
    if config.languages.tgt.is_empty() {
        out.push(Diagnostic::new("languages.tgt", "language code must be non-empty"));
    }
    if config.languages.src == config.languages.tgt {
        out.push(Diagnostic::new("languages", "src and tgt languages must differ"));
    }
    for name in required_inputs(stage) {
        match path_field(&config.paths, name) {
            None => out.push(Diagnostic::new(format!("paths.{name}"), "path is required")),
            Some(p) if !config.resolve(p).exists() => out.push(Diagnostic::new(
                format!("paths.{name}"),
                format!("{} does not exist", config.resolve(p).display()),
            )),
            Some(_) => {}
        }
    }
    // Optional inputs must exist when given.
    for name in ["hyp", "baseline_hyp", "truth", "kb_tsv"] {
        if required_inputs(stage).contains(&name) {
            continue;
        }
        if let Some(p) = path_field(&config.paths, name) {
            if stage.is_none() && !config.resolve(p).exists() {
                out.push(Diagnostic::new(
                    format!("paths.{name}"),
                    format!("{} does not exist", config.resolve(p).display()),
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
[paths]
kb = "kb.jsonl"
vocab = "vocab.txt"
mono = "mono.jsonl"
finetune = "finetune.jsonl"
test = "test.jsonl"
output_dir = "out"
[languages]
src = "en"
tgt = "xx"
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = PipelineConfig::parse(MINIMAL, Path::new("/data")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.noise.mask_ratio, 0.35);
        assert_eq!(cfg.noise.lambda, 3.5);
        assert_eq!(cfg.sampler.objective, Objective::Deep);
        assert_eq!(cfg.resolve(Path::new("kb.jsonl")), Path::new("/data/kb.jsonl"));
        let back = PipelineConfig::parse(&cfg.to_toml(), Path::new("/data")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace("seed = 7", "");
        let errs = PipelineConfig::parse(&text, Path::new(".")).unwrap_err();
        assert_eq!(errs[0].field, "seed");
    }

    #[test]
    fn unknown_field_named() {
        let text = MINIMAL.replace("seed = 7", "seed = 7\nsede = 3");
        let errs = PipelineConfig::parse(&text, Path::new(".")).unwrap_err();
        assert_eq!(errs[0].field, "sede");
    }

    #[test]
    fn mask_ratio_diagnostic() {
        let text = format!("{MINIMAL}\n[noise]\nmask_ratio = 1.5\n");
        let cfg = PipelineConfig::parse(&text, Path::new("/nonexistent")).unwrap();
        let diags = validate(&cfg);
        assert!(diags
            .iter()
            .any(|d| d.field == "noise.mask_ratio" && d.message == "mask_ratio must be in (0,1]"));
    }

    #[test]
    fn missing_kb_named() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["vocab.txt", "mono.jsonl", "finetune.jsonl", "test.jsonl"] {
            fs::write(dir.path().join(f), "").unwrap();
        }
        let cfg = PipelineConfig::parse(MINIMAL, dir.path()).unwrap();
        let diags = validate(&cfg);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert_eq!(diags[0].field, "paths.kb");
        fs::write(dir.path().join("kb.jsonl"), "").unwrap();
        assert!(validate(&cfg).is_empty());
    }

    #[test]
    fn stage_scoping() {
        let cfg = PipelineConfig::parse(MINIMAL, Path::new("/nonexistent")).unwrap();
        assert!(validate_stage(&cfg, Some("synth")).is_empty());
        let d = validate_stage(&cfg, Some("eval"));
        assert!(d.iter().any(|d| d.field == "paths.hyp" && d.message == "path is required"));
    }
}
