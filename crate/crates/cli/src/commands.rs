use std::fs;
use std::path::{Path, PathBuf};

use genderdist::bias::{kl_records, BiasReport, KlRecord};
use genderdist::corpus::{
    categorize_templates, default_dataset, generate_synthetic_corpus, load_gendered_pairs, load_professions,
    load_templates, stratified_split, tokenize, GenderedPair, Profession, ProfessionSplit, SkewConfig,
    SplitRatios, Template,
};
use genderdist::mitigation::{
    multi_seed_run, select_hyperparameters, sweep, write_history_csv, write_sweep_csv,
    write_validation_curve_csv, EvalSet, FinetuneData, HistoryRow, MultiSeedSummary, SweepPoint,
};
use genderdist::scoring::{predicted_distributions, ScoringMode};
use genderdist::toymodel::{lm_loss, pretrain, required_tokens, PretrainReport, ToyModel, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::exit::{self, Failure};
use crate::report::{sha256_hex, ReportFile, SummaryTable};

pub const PRETRAIN_FILE: &str = "pretrain.txt";
pub const HELDOUT_FILE: &str = "heldout.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BASE_CHECKPOINT: &str = "base.json";
pub const BASE_REPORT: &str = "base.json";

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::from(e).context(format!("creating {}", dir.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::from(e).context(format!("writing {}", path.display())))
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::from(e).context(format!("reading {}", path.display())))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

struct Dataset {
    professions: Vec<Profession>,
    pairs: Vec<GenderedPair>,
    templates: Vec<Template>,
}

/// Configured input files, falling back to the bundled dataset per file.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let (default_professions, default_pairs, default_templates) = default_dataset();
    let professions = match &cfg.professions {
        Some(p) => {
            let loaded = load_professions(p)?;
            for w in &loaded.warnings {
                log::warn!("{w}");
            }
            loaded.professions
        }
        None => default_professions.professions,
    };
    let pairs = match &cfg.pairs {
        Some(p) => load_gendered_pairs(p)?,
        None => default_pairs,
    };
    let templates = match &cfg.templates {
        Some(p) => load_templates(p)?,
        None => default_templates,
    };
    Ok(Dataset { professions, pairs, templates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub pretrain_lines: usize,
    pub heldout_lines: usize,
    pub pretrain_sha256: String,
    pub heldout_sha256: String,
    pub skew: SkewConfig,
}

pub fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let data = load_dataset(cfg)?;
    let skew = cfg.skew_config(&data.professions);
    let corpus = generate_synthetic_corpus(&skew, &data.professions, &data.pairs, &data.templates)?;
    let dir = cfg.corpus_dir(out);
    create_dir(&dir)?;
    let join = |sentences: &[genderdist::corpus::CorpusSentence]| -> String {
        sentences.iter().map(|s| format!("{}\n", s.text)).collect()
    };
    let pretrain_text = join(&corpus.pretrain);
    let heldout_text = join(&corpus.heldout);
    write(&dir.join(PRETRAIN_FILE), &pretrain_text)?;
    write(&dir.join(HELDOUT_FILE), &heldout_text)?;
    let manifest = CorpusManifest {
        schema_version: crate::report::SCHEMA_VERSION,
        seed: skew.seed,
        pretrain_lines: corpus.pretrain.len(),
        heldout_lines: corpus.heldout.len(),
        pretrain_sha256: sha256_hex(pretrain_text.as_bytes()),
        heldout_sha256: sha256_hex(heldout_text.as_bytes()),
        skew,
    };
    write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} pretraining and {} held-out sentences to {}",
        manifest.pretrain_lines,
        manifest.heldout_lines,
        dir.display()
    );
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>, Failure> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

pub fn pretrain_cmd(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let data = load_dataset(cfg)?;
    let dir = cfg.corpus_dir(out);
    let train = read_corpus(&dir.join(PRETRAIN_FILE))?;
    let heldout = read_corpus(&dir.join(HELDOUT_FILE))?;
    let mut tokens = required_tokens(&data.professions, &data.pairs, &data.templates);
    tokens.extend(train.iter().flatten().cloned());
    let vocab = Vocabulary::build(tokens);
    let mut model = ToyModel::new(vocab, cfg.model_dim, cfg.model_max_len, cfg.model_mode, cfg.seed);
    let report = pretrain(&mut model, &train, &heldout, &cfg.pretrain_config())?;
    let ckpt_dir = cfg.checkpoint_dir(out);
    create_dir(&ckpt_dir)?;
    let path = ckpt_dir.join(BASE_CHECKPOINT);
    write(&path, model.to_checkpoint_bytes()?)?;
    write(&ckpt_dir.join("pretrain_report.json"), serde_json::to_string_pretty(&report)?)?;
    print_pretrain(&report, &path);
    Ok(())
}

fn print_pretrain(report: &PretrainReport, path: &Path) {
    match (report.heldout_loss.first(), report.heldout_loss.last()) {
        (Some(a), Some(b)) => println!("held-out loss {a:.4} -> {b:.4}; checkpoint {}", path.display()),
        _ => println!("checkpoint {}", path.display()),
    }
}

/// Model, split and templates shared by detect, mitigate and sweep.
struct Setup {
    data: Dataset,
    model: ToyModel,
    checkpoint_sha256: String,
    split: ProfessionSplit,
    train_templates: Vec<Template>,
    test_templates: Vec<Template>,
    heldout: Vec<Vec<String>>,
    corpus_id: String,
}

fn pick(templates: &[Template], ids: &[String]) -> Result<Vec<Template>, Failure> {
    ids.iter()
        .map(|id| {
            templates
                .iter()
                .find(|t| &t.id == id)
                .cloned()
                .ok_or_else(|| Failure::config(format!("unknown template id `{id}`")))
        })
        .collect()
}

fn setup(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<Setup, Failure> {
    let data = load_dataset(cfg)?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.checkpoint_dir(out).join(BASE_CHECKPOINT));
    let bytes = fs::read(&path).map_err(|e| Failure::from(e).context(format!("reading {}", path.display())))?;
    let model = ToyModel::from_checkpoint_bytes(&bytes)
        .map_err(|e| Failure::from(e).context(format!("loading {}", path.display())))?;
    let required = required_tokens(&data.professions, &data.pairs, &data.templates);
    let missing = model.vocab.missing(required.iter().map(String::as_str));
    if !missing.is_empty() {
        return Err(Failure::new(
            exit::VOCABULARY,
            genderdist::Error::VocabularyMismatch(missing),
        )
        .context(format!("checkpoint {} cannot score this dataset", path.display())));
    }
    let split = stratified_split(&data.professions, SplitRatios::default(), cfg.split_seed)?;
    let (train_ids, test_ids) = if cfg.train_templates.is_empty() {
        let partition = categorize_templates(&model, &data.templates, &data.professions, &data.pairs, cfg.ppl_cutoff)
            .map_err(|e| {
                Failure::from(e).context(format!(
                    "partitioning templates at ppl_cutoff {}; set split.train_templates and split.test_templates or change the cutoff",
                    cfg.ppl_cutoff
                ))
            })?;
        (partition.train, partition.test)
    } else {
        (cfg.train_templates.clone(), cfg.test_templates.clone())
    };
    let train_templates = pick(&data.templates, &train_ids)?;
    let test_templates = pick(&data.templates, &test_ids)?;
    let heldout_path = cfg.corpus_dir(out).join(HELDOUT_FILE);
    let heldout = if heldout_path.exists() {
        read_corpus(&heldout_path)?
    } else {
        log::warn!("no held-out corpus at {}; LM loss not reported", heldout_path.display());
        Vec::new()
    };
    let identity = serde_json::json!({
        "target": cfg.target,
        "professions": split.test.iter().map(|p| (&p.name, p.female_share)).collect::<Vec<_>>(),
        "templates": test_templates.iter().map(|t| (&t.id, &t.text)).collect::<Vec<_>>(),
        "pairs": data.pairs,
        "heldout_sha256": sha256_hex(serde_json::to_string(&heldout)?.as_bytes()),
    });
    let corpus_id = sha256_hex(serde_json::to_string(&identity)?.as_bytes());
    Ok(Setup {
        data,
        model,
        checkpoint_sha256: sha256_hex(&bytes),
        split,
        train_templates,
        test_templates,
        heldout,
        corpus_id,
    })
}

impl Setup {
    fn finetune_data(&self) -> FinetuneData<'_> {
        FinetuneData {
            train: &self.split.train,
            validation: &self.split.validation,
            templates: &self.train_templates,
            pairs: &self.data.pairs,
        }
    }

    fn test_eval(&self) -> EvalSet<'_> {
        EvalSet {
            professions: &self.split.test,
            templates: &self.test_templates,
            pairs: &self.data.pairs,
            lm_sentences: &self.heldout,
        }
    }

    fn records(&self, kls: &[f64]) -> Vec<KlRecord> {
        self.split
            .test
            .iter()
            .zip(kls)
            .map(|(p, &kl)| KlRecord {
                profession: p.name.clone(),
                category: p.category,
                kl,
            })
            .collect()
    }

    fn load_base(&self, cfg: &RunConfig, out: &Path, base: Option<&Path>) -> Result<ReportFile, Failure> {
        let path = base
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.report_dir(out).join(BASE_REPORT));
        let report = ReportFile::load(&path).map_err(|e| e.context("a base detection report is required; run `detect` first"))?;
        if report.corpus_id != self.corpus_id {
            return Err(Failure::mismatch(format!(
                "base report {} measured corpus {}, this run evaluates {}",
                path.display(),
                report.corpus_id,
                self.corpus_id
            )));
        }
        if report.checkpoint_sha256 != self.checkpoint_sha256 {
            return Err(Failure::mismatch(format!(
                "base report {} was made from a different checkpoint",
                path.display()
            )));
        }
        Ok(report)
    }
}

pub fn detect(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, name: &str) -> Result<(), Failure> {
    let s = setup(cfg, out, checkpoint)?;
    let predicted = predicted_distributions(&s.model, &s.split.test, &s.test_templates, &s.data.pairs)?;
    let records = kl_records(&s.split.test, &predicted, cfg.target)?;
    let report = BiasReport::new(ScoringMode::from(s.model.mode), cfg.target, records)?;
    let lm = if s.heldout.is_empty() {
        None
    } else {
        Some(lm_loss(&s.model, &s.heldout)?)
    };
    let file = ReportFile::new(name, &s.corpus_id, &s.checkpoint_sha256, None, lm, report);
    let dir = cfg.report_dir(out);
    create_dir(&dir)?;
    let path = dir.join(format!("{name}.json"));
    file.save(&path)?;
    let table = SummaryTable::from_reports(std::slice::from_ref(&file))?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write(&dir.join(format!("{name}_summary.csv")), csv)?;
    println!(
        "{name}: ALL KL {:.6} over {} test professions ({}); report {}",
        file.report.all.mean,
        file.report.records.len(),
        cfg.target.label(),
        path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub failure: Option<String>,
    pub report_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MitigationSummary {
    pub schema_version: u32,
    pub config: RunConfig,
    pub table: SummaryTable,
    pub summary: MultiSeedSummary,
    pub seeds: Vec<SeedResult>,
}

pub fn mitigate(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    base: Option<&Path>,
) -> Result<(), Failure> {
    let s = setup(cfg, out, checkpoint)?;
    let base = s.load_base(cfg, out, base)?;
    let report = multi_seed_run(&s.model, &s.finetune_data(), &s.test_eval(), &cfg.train_config(cfg.seeds[0]), &cfg.seeds)
        .map_err(|e| Failure::new(exit::TRAINING, e))?;
    let report_dir = cfg.report_dir(out);
    let ckpt_dir = cfg.checkpoint_dir(out);
    create_dir(&report_dir)?;
    create_dir(&ckpt_dir)?;
    let mut seeds = Vec::new();
    for run in &report.runs {
        let mut result = SeedResult {
            seed: run.seed,
            best_epoch: None,
            epochs_run: None,
            failure: run.failure.clone(),
            report_id: None,
        };
        if let Some(o) = &run.outcome {
            result.best_epoch = Some(o.best_epoch);
            result.epochs_run = Some(o.epochs_run);
            write(&ckpt_dir.join(format!("tuned_seed_{}.json", run.seed)), o.model.to_checkpoint_bytes()?)?;
            let mut csv = Vec::new();
            write_history_csv(&o.history, &mut csv)?;
            write(&report_dir.join(format!("history_seed_{}.csv", run.seed)), csv)?;
            let mut curve = Vec::new();
            write_validation_curve_csv(&o.history, &mut curve)?;
            write(&report_dir.join(format!("validation_curve_seed_{}.csv", run.seed)), curve)?;
        }
        if let (Some(e), Some(o)) = (&run.evaluation, &run.outcome) {
            let tuned = BiasReport::new(ScoringMode::from(o.model.mode), cfg.target, s.records(&e.kl_values))?;
            let label = format!("tuned_seed_{}", run.seed);
            let sha = sha256_hex(&o.model.to_checkpoint_bytes()?);
            let file = ReportFile::new(&label, &s.corpus_id, &sha, Some(base.id.clone()), e.lm_loss, tuned);
            file.save(&report_dir.join(format!("{label}.json")))?;
            result.report_id = Some(file.id.clone());
        }
        if let Some(f) = &run.failure {
            eprintln!("seed {} failed: {f}", run.seed);
        }
        seeds.push(result);
    }
    let table = SummaryTable::new(
        &base.id,
        base.means(),
        Some(report.summary.tuned.clone()),
        base.lm_loss,
        report.summary.tuned_lm_loss,
        report.summary.significance,
    );
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write(&report_dir.join("mitigation_summary.csv"), csv)?;
    write(&report_dir.join("mitigation_summary.md"), table.to_markdown())?;
    let summary = MitigationSummary {
        schema_version: crate::report::SCHEMA_VERSION,
        config: cfg.clone(),
        table,
        summary: report.summary,
        seeds,
    };
    write(&report_dir.join("mitigation_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let drop = summary.table.drop_percent.as_ref().and_then(|d| d.get("ALL")).copied().unwrap_or(f64::NAN);
    println!(
        "{} of {} seeds completed; ALL KL drop {drop:.2}%",
        summary.seeds.len() - summary.summary.failed_seeds.len(),
        summary.seeds.len()
    );
    Ok(())
}

pub fn sweep_cmd(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, base: Option<&Path>) -> Result<(), Failure> {
    let s = setup(cfg, out, checkpoint)?;
    s.load_base(cfg, out, base)?;
    if cfg.sweep_betas.is_empty() || cfg.sweep_gammas.is_empty() || cfg.sweep_batch_sizes.is_empty() {
        return Err(Failure::config("sweep grids must be nonempty"));
    }
    let points = SweepPoint::grid(&cfg.sweep_betas, &cfg.sweep_gammas, &cfg.sweep_batch_sizes);
    let validation = EvalSet {
        professions: &s.split.validation,
        templates: &s.train_templates,
        pairs: &s.data.pairs,
        lm_sentences: &[],
    };
    let runs = sweep(&s.model, &s.finetune_data(), &validation, &cfg.train_config(cfg.seed), &points, &[cfg.seed])
        .map_err(|e| Failure::new(exit::TRAINING, e).context("every sweep run failed"))?;
    let selected = select_hyperparameters(&runs)?;
    let dir = cfg.report_dir(out);
    create_dir(&dir)?;
    let mut csv = Vec::new();
    write_sweep_csv(&runs, Some(selected), &mut csv)?;
    write(&dir.join("sweep.csv"), csv)?;
    let chosen = runs[selected].point;
    let selected_cfg = RunConfig {
        beta: chosen.beta,
        gamma: chosen.gamma,
        batch_size: chosen.batch_size,
        ..cfg.clone()
    };
    write(&dir.join("selected_config.json"), selected_cfg.to_json())?;
    println!("{} of {} runs completed; selected {}", runs.len(), points.len(), chosen.label());
    Ok(())
}

fn read_history(path: &Path) -> Result<Vec<HistoryRow>, Failure> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Failure::from(genderdist::Error::from(e)).context(format!("reading {}", path.display())))?;
    reader
        .deserialize()
        .collect::<Result<Vec<HistoryRow>, _>>()
        .map_err(|e| Failure::from(genderdist::Error::from(e)).context(format!("parsing {}", path.display())))
}

pub fn report(cfg: &RunConfig, out: &Path, reports: &[PathBuf], histories: &[PathBuf]) -> Result<(), Failure> {
    let files = reports.iter().map(|p| ReportFile::load(p)).collect::<Result<Vec<_>, _>>()?;
    let table = SummaryTable::from_reports(&files)?;
    let dir = cfg.report_dir(out);
    create_dir(&dir)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write(&dir.join("report_summary.csv"), csv)?;
    let markdown = table.to_markdown();
    write(&dir.join("report_summary.md"), &markdown)?;
    write(&dir.join("report_summary.json"), serde_json::to_string_pretty(&table)?)?;
    for h in histories {
        let rows = read_history(h)?;
        let stem = h.file_stem().and_then(|s| s.to_str()).unwrap_or("history");
        let mut plot = Vec::new();
        write_validation_curve_csv(&rows, &mut plot)?;
        write(&dir.join(format!("plot_{stem}.csv")), plot)?;
    }
    print!("{markdown}");
    Ok(())
}
