use std::fmt::Display;

use super::{classify_gender, Bucket, Detector, GenderLexicon, SafetyError, StyleRegistry};
use crate::textdata::Episode;

/// `100 * offensive / total`.
pub fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToxicityCell {
    pub split: String,
    pub detector: String,
    pub offensive: usize,
    pub total: usize,
}

impl ToxicityCell {
    pub fn percent(&self) -> f64 {
        percent(self.offensive, self.total)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToxicityRow {
    pub conditioning: String,
    pub cells: Vec<ToxicityCell>,
}

impl ToxicityRow {
    pub fn cell(&self, split: &str, detector: &str) -> Option<&ToxicityCell> {
        self.cells.iter().find(|c| c.split == split && c.detector == detector)
    }
}

/// Rows are conditioning strings; columns are detectors, optionally split
/// by a per-episode key such as the previous speaker's style polarity.
#[derive(Clone, Debug, PartialEq)]
pub struct ToxicityReport {
    pub splits: Vec<String>,
    pub detectors: Vec<String>,
    pub rows: Vec<ToxicityRow>,
}

/// Maps an episode to its split label.
pub type SplitKey<'a> = Box<dyn Fn(&Episode) -> Option<String> + 'a>;

/// Groups episodes for split columns; episodes mapped to `None` are left
/// out.
pub struct Split<'a> {
    pub labels: Vec<String>,
    pub key: SplitKey<'a>,
}

/// Splits second-round episodes by the polarity of the partner's style:
/// `pos` for positive or neutral styles, `neg` for negative ones.
pub fn polarity_split(registry: &StyleRegistry) -> Split<'_> {
    Split {
        labels: vec!["pos".into(), "neg".into()],
        key: Box::new(move |ep: &Episode| {
            let b = registry.bucket(ep.partner_style.as_deref()?)?;
            Some(if b == Bucket::Negative { "neg" } else { "pos" }.to_string())
        }),
    }
}

impl ToxicityReport {
    pub fn row(&self, conditioning: &str) -> Option<&ToxicityRow> {
        self.rows.iter().find(|r| r.conditioning == conditioning)
    }

    /// Tab-separated: one row per conditioning; for every (split, detector)
    /// a percentage column with two decimals plus the offensive and total
    /// counts it was computed from.
    pub fn to_tsv(&self) -> String {
        let single = self.splits.len() == 1 && self.splits[0] == ALL;
        let label = |s: &str, d: &str| if single { d.to_string() } else { format!("{s} {d}") };
        let mut out = String::from("conditioning");
        for s in &self.splits {
            for d in &self.detectors {
                let l = label(s, d);
                out.push_str(&format!("\t{l}\t{l} offensive\t{l} total"));
            }
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.conditioning);
            for c in &r.cells {
                out.push_str(&format!("\t{:.2}\t{}\t{}", c.percent(), c.offensive, c.total));
            }
            out.push('\n');
        }
        out
    }
}

const ALL: &str = "all";

/// Generates one response per episode under each fixed conditioning and
/// counts the responses every detector flags.
pub fn toxicity_report<F, E>(
    episodes: &[Episode],
    conditionings: &[String],
    detectors: &[&dyn Detector],
    split: Option<&Split<'_>>,
    mut generate: F,
) -> Result<ToxicityReport, SafetyError>
where
    F: FnMut(&Episode, &str) -> Result<String, E>,
    E: Display,
{
    if episodes.is_empty() {
        return Err(SafetyError::EmptyEpisodes);
    }
    let splits: Vec<String> = split.map_or_else(|| vec![ALL.to_string()], |s| s.labels.clone());
    let keys: Vec<Option<String>> = episodes
        .iter()
        .map(|e| match split {
            None => Some(ALL.to_string()),
            Some(s) => (s.key)(e),
        })
        .collect();
    let mut rows = Vec::with_capacity(conditionings.len());
    for cond in conditionings {
        let mut cells: Vec<ToxicityCell> = splits
            .iter()
            .flat_map(|s| {
                detectors.iter().map(move |d| ToxicityCell {
                    split: s.clone(),
                    detector: d.name().to_string(),
                    offensive: 0,
                    total: 0,
                })
            })
            .collect();
        for (ep, key) in episodes.iter().zip(&keys) {
            let Some(si) = key.as_ref().and_then(|k| splits.iter().position(|s| s == k)) else {
                continue;
            };
            let text = generate(ep, cond).map_err(|e| SafetyError::Generation(e.to_string()))?;
            for (di, d) in detectors.iter().enumerate() {
                let cell = &mut cells[si * detectors.len() + di];
                cell.total += 1;
                cell.offensive += d.is_offensive(&text) as usize;
            }
        }
        rows.push(ToxicityRow {
            conditioning: cond.clone(),
            cells,
        });
    }
    Ok(ToxicityReport {
        splits,
        detectors: detectors.iter().map(|d| d.name().to_string()).collect(),
        rows,
    })
}

/// How many utterances contain female or male words.
#[derive(Clone, Debug, PartialEq)]
pub struct GenderRateRow {
    pub name: String,
    pub total: usize,
    pub female: usize,
    pub male: usize,
}

impl GenderRateRow {
    pub fn female_percent(&self) -> f64 {
        percent(self.female, self.total)
    }

    pub fn male_percent(&self) -> f64 {
        percent(self.male, self.total)
    }
}

pub fn gender_rates(name: &str, utterances: &[String], lex: &GenderLexicon) -> GenderRateRow {
    let mut row = GenderRateRow {
        name: name.to_string(),
        total: utterances.len(),
        female: 0,
        male: 0,
    };
    for u in utterances {
        let f = classify_gender(u, lex);
        row.female += f.female as usize;
        row.male += f.male as usize;
    }
    row
}

/// Tab-separated rows of male/female word rates, percentages with two
/// decimals alongside the counts.
pub fn gender_rates_tsv(rows: &[GenderRateRow]) -> String {
    let mut out = String::from("model\tmale words %\tfemale words %\tmale count\tfemale count\ttotal\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.2}\t{:.2}\t{}\t{}\t{}\n",
            r.name,
            r.male_percent(),
            r.female_percent(),
            r.male,
            r.female,
            r.total
        ));
    }
    out
}
