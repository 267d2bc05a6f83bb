use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use genderdist::bias::{significance_test, BiasReport, Significance};
use genderdist::mitigation::drop_percent;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exit::Failure;

pub const SCHEMA_VERSION: u32 = 1;
pub const COLUMNS: [&str; 4] = ["DP_male", "DP_female", "DP_balanced", "ALL"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A bias report plus the identity of what it measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    /// Hash of everything below.
    pub id: String,
    /// Hash of the evaluation set: professions, templates, pairs, target.
    pub corpus_id: String,
    pub label: String,
    pub checkpoint_sha256: String,
    /// Id of the report this one is compared against, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_report_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_loss: Option<f64>,
    pub report: BiasReport,
}

impl ReportFile {
    pub fn new(
        label: &str,
        corpus_id: &str,
        checkpoint_sha256: &str,
        base_report_id: Option<String>,
        lm_loss: Option<f64>,
        report: BiasReport,
    ) -> Self {
        let mut file = ReportFile {
            schema_version: SCHEMA_VERSION,
            id: String::new(),
            corpus_id: corpus_id.to_string(),
            label: label.to_string(),
            checkpoint_sha256: checkpoint_sha256.to_string(),
            base_report_id,
            lm_loss,
            report,
        };
        file.id = sha256_hex(&serde_json::to_vec(&file).expect("report serializes"));
        file
    }

    pub fn means(&self) -> BTreeMap<String, f64> {
        let mut m: BTreeMap<String, f64> = self
            .report
            .per_category
            .iter()
            .map(|(c, s)| (c.label().to_string(), s.mean))
            .collect();
        m.insert("ALL".into(), self.report.all.mean);
        m
    }

    pub fn save(&self, path: &Path) -> Result<(), Failure> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Failure::from(e).context(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::from(e).context(format!("reading {}", path.display())))?;
        let file: ReportFile = serde_json::from_str(&text)
            .map_err(|e| Failure::from(e).context(format!("parsing {}", path.display())))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Failure::config(format!(
                "{}: unsupported schema version {}",
                path.display(),
                file.schema_version
            )));
        }
        Ok(file)
    }
}

/// Base and tuned rows of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub base_report_id: String,
    pub base: BTreeMap<String, f64>,
    pub tuned: Option<BTreeMap<String, f64>>,
    pub drop_percent: Option<BTreeMap<String, f64>>,
    pub base_lm_loss: Option<f64>,
    pub tuned_lm_loss: Option<f64>,
    pub significance: Option<Significance>,
}

impl SummaryTable {
    pub fn new(
        base_report_id: &str,
        base: BTreeMap<String, f64>,
        tuned: Option<BTreeMap<String, f64>>,
        base_lm_loss: Option<f64>,
        tuned_lm_loss: Option<f64>,
        significance: Option<Significance>,
    ) -> Self {
        let drop = tuned.as_ref().map(|t| {
            t.iter()
                .filter_map(|(k, v)| base.get(k).map(|b| (k.clone(), drop_percent(*b, *v))))
                .collect()
        });
        SummaryTable {
            base_report_id: base_report_id.to_string(),
            base,
            tuned,
            drop_percent: drop,
            base_lm_loss,
            tuned_lm_loss,
            significance,
        }
    }

    /// First report is the base; the rest are tuned runs averaged in the
    /// given order.
    pub fn from_reports(reports: &[ReportFile]) -> Result<Self, Failure> {
        let (base, tuned) = reports.split_first().ok_or_else(|| Failure::config("no reports given"))?;
        for r in tuned {
            if r.corpus_id != base.corpus_id {
                return Err(Failure::mismatch(format!(
                    "report {} measured corpus {} but base {} measured {}",
                    r.label, r.corpus_id, base.label, base.corpus_id
                )));
            }
            if let Some(b) = &r.base_report_id {
                if b != &base.id {
                    return Err(Failure::mismatch(format!(
                        "report {} refers to base {b}, not {}",
                        r.label, base.id
                    )));
                }
            }
        }
        if tuned.is_empty() {
            return Ok(SummaryTable::new(&base.id, base.means(), None, base.lm_loss, None, None));
        }
        let n = tuned.len() as f64;
        let mut means: BTreeMap<String, f64> = BTreeMap::new();
        for r in tuned {
            for (k, v) in r.means() {
                *means.entry(k).or_default() += v / n;
            }
        }
        let lm = tuned
            .iter()
            .map(|r| r.lm_loss)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        let before = base.report.kl_values();
        let mut after = vec![0.0; before.len()];
        for r in tuned {
            let kls = r.report.kl_values();
            if kls.len() != before.len() {
                return Err(Failure::mismatch(format!(
                    "report {} has {} professions, base has {}",
                    r.label,
                    kls.len(),
                    before.len()
                )));
            }
            for (a, v) in after.iter_mut().zip(kls) {
                *a += v / n;
            }
        }
        let significance = if before.len() >= 2 {
            Some(significance_test(&before, &after)?)
        } else {
            None
        };
        Ok(SummaryTable::new(&base.id, base.means(), Some(means), base.lm_loss, lm, significance))
    }

    fn rows(&self) -> Vec<(String, Vec<String>)> {
        let cells = |m: &BTreeMap<String, f64>| -> Vec<String> {
            COLUMNS.iter().map(|c| m.get(*c).map(|v| format!("{v:.6}")).unwrap_or_default()).collect()
        };
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut base = cells(&self.base);
        base.extend([opt(self.base_lm_loss), String::new()]);
        let mut rows = vec![("base".to_string(), base)];
        if let (Some(t), Some(d)) = (&self.tuned, &self.drop_percent) {
            let marker = match self.significance {
                Some(s) if s.significant => "*",
                _ => "",
            };
            let mut tuned = cells(t);
            tuned.extend([opt(self.tuned_lm_loss), marker.to_string()]);
            rows.push(("tuned".to_string(), tuned));
            let lm_drop = match (self.base_lm_loss, self.tuned_lm_loss) {
                (Some(b), Some(t)) => Some(drop_percent(b, t)),
                _ => None,
            };
            let mut drop: Vec<String> =
                COLUMNS.iter().map(|c| d.get(*c).map(|v| format!("{v:.6}")).unwrap_or_default()).collect();
            drop.extend([lm_drop.map(|v| format!("{v:.6}")).unwrap_or_default(), String::new()]);
            rows.push(("drop_percent".to_string(), drop));
        }
        rows
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), Failure> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row"];
        header.extend(COLUMNS);
        header.extend(["lm_loss", "significant"]);
        w.write_record(&header).map_err(genderdist::Error::from)?;
        for (label, cells) in self.rows() {
            let mut record = vec![label];
            record.extend(cells);
            w.write_record(&record).map_err(genderdist::Error::from)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| row | DP_male | DP_female | DP_balanced | ALL | lm_loss | significant |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for (label, cells) in self.rows() {
            s.push_str(&format!("| {label} | {} |\n", cells.join(" | ")));
        }
        s.push_str(&format!("\nbase report: `{}`\n", self.base_report_id));
        s
    }
}
