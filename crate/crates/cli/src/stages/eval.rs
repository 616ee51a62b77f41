//! Evaluation: accuracy, interval behaviour, group separation and trial
//! sample sizes, against the held-out ground truth.

use std::collections::BTreeMap;
use std::time::Instant;

use deepatrophy_core::synth::{parse_truth_csv, CohortLabel, TRUTH_FILE};
use deepatrophy_stats::hypothesis::{binomial_chance_test, two_sample_t};
use deepatrophy_stats::metrics::{
    delong_test, order_from_volume_change, risi_accuracy, roc_auc, sto_accuracy, DeLong, RisiAccuracy,
};
use deepatrophy_stats::progression::PiiModel;
use deepatrophy_stats::samplesize::bootstrap_ci;
use log::info;
use serde::{Deserialize, Serialize};

use super::preprocess_qc_counts;
use super::score::{
    corrected, from_csv, load_pii_model, to_csv, BaselineScoreRow, SamedayRow, ScoreRow, ScoredPair,
    BASELINE_SCORES_FILE, SAMEDAY_SCORES_FILE, SCORED_PAIRS_FILE, SCORES_FILE,
};
use crate::artifacts::{write, Run, StageManifest};
use crate::config::{EvalConfig, Stage};
use crate::error::{CliError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const SPAGHETTI_FILE: &str = "spaghetti.csv";
pub const GROUPS_FILE: &str = "groups.csv";
pub const SAMPLE_SIZE_FILE: &str = "sample_size.csv";

/// Minimum pairs at one interval for it to enter the linearity regression.
const MIN_PAIRS_PER_INTERVAL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_test_subjects: usize,
    pub n_test_pairs: usize,
    pub qc: QcSummary,
    pub pii_model: PiiModel,
    pub sto: StoReport,
    pub risi: RisiReport,
    pub sameday: SamedayReport,
    pub intervals: IntervalReport,
    pub groups: Vec<GroupRow>,
    pub sample_size: Vec<SampleSizeRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcSummary {
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub accuracy: f64,
    pub auc: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoReport {
    pub network: Classifier,
    pub baseline: Classifier,
    /// Order called from the true structure volumes.
    pub oracle_accuracy: f64,
    /// Network AUC against baseline AUC on the same pairs.
    pub delong: DeLong,
    pub by_cohort: BTreeMap<String, CohortSto>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSto {
    pub n: usize,
    pub network_accuracy: f64,
    pub baseline_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RisiReport {
    pub network: RisiAccuracy,
    pub baseline: RisiAccuracy,
    pub oracle: RisiAccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamedayReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub p_accuracy: f64,
    /// Pairs called chronological, whatever their order.
    pub positive: usize,
    pub p_positive: f64,
    pub baseline_correct: usize,
    pub p_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalBin {
    pub nominal_days: f64,
    pub n: usize,
    #[serde(with = "nullable")]
    pub mean_pii: f64,
    pub by_cohort: BTreeMap<String, BinCohort>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinCohort {
    pub n: usize,
    pub mean_pii: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub bins: Vec<IntervalBin>,
    /// Every cohort's mean PII, and the pooled mean, rise bin over bin.
    pub strictly_increasing: bool,
    /// Max minus min of the pooled bin means, days.
    #[serde(with = "nullable")]
    pub spread: f64,
    /// R^2 of the line through (interval, mean PII) over distinct intervals.
    #[serde(with = "nullable")]
    pub r2: f64,
    pub r2_points: usize,
    pub r2_by_cohort: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub window: String,
    pub method: String,
    pub cohort: CohortLabel,
    pub n: usize,
    pub n_control: usize,
    pub mean: f64,
    pub sd: f64,
    pub control_mean: f64,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeRow {
    pub window: String,
    pub method: String,
    pub cohort: CohortLabel,
    pub n_estimate: u64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub infinite_replicates: usize,
}

#[derive(Clone, Debug, Serialize)]
struct SpaghettiRow<'a> {
    subject: &'a str,
    cohort: CohortLabel,
    t_days: f64,
    pii: f64,
    baseline_change_pct: f64,
    true_change_pct: f64,
}

pub fn run(run: &Run) -> Result<StageManifest> {
    let started = Instant::now();
    let stage = Stage::Eval;
    for up in [Stage::Synth, Stage::Preprocess, Stage::Train, Stage::Score] {
        run.require(stage, up)?;
    }
    run.invalidate(stage)?;
    let dir = run.prepare(stage)?;
    let cfg = &run.cfg;

    let read_csv = |file: &str| run.read_string(stage, &run.path(Stage::Score, file));
    let pairs: Vec<ScoredPair> = from_csv(&read_csv(SCORED_PAIRS_FILE)?)?;
    let scores: Vec<ScoreRow> = from_csv(&read_csv(SCORES_FILE)?)?;
    let baseline: Vec<BaselineScoreRow> = from_csv(&read_csv(BASELINE_SCORES_FILE)?)?;
    let sameday: Vec<SamedayRow> = from_csv(&read_csv(SAMEDAY_SCORES_FILE)?)?;
    let pii_model = load_pii_model(run, stage)?;
    let truth_rows = parse_truth_csv(&run.read_string(stage, &run.path(Stage::Synth, TRUTH_FILE))?)?;
    let mut truth: BTreeMap<(String, u64), f64> = BTreeMap::new();
    let mut rates: BTreeMap<String, f64> = BTreeMap::new();
    for r in &truth_rows {
        truth.insert((r.subject_id.clone(), r.t_days.to_bits()), r.true_volume_mm3);
        rates.insert(r.subject_id.clone(), r.true_rate);
    }
    let true_volume = |subject: &str, t: f64| -> Result<f64> {
        truth
            .get(&(subject.to_string(), t.to_bits()))
            .copied()
            .ok_or_else(|| CliError::Data(format!("no ground truth for {subject} at day {t}")))
    };
    let true_change = |p: &ScoredPair| -> Result<f64> {
        let (a, b) = (true_volume(&p.subject, p.t_i)?, true_volume(&p.subject, p.t_j)?);
        Ok((b - a) / a)
    };
    if pairs.is_empty() {
        return Err(CliError::Data("no scored held-out pairs".into()));
    }

    let sto = sto_report(&pairs, &true_change)?;
    let risi = risi_report(&pairs, &true_change)?;
    let sameday = sameday_report(&sameday)?;
    let intervals = interval_report(&pairs, cfg);

    let mut methods: Vec<(&str, Vec<(String, CohortLabel, f64, f64)>)> = vec![
        (
            "network",
            scores
                .iter()
                .map(|r| (r.window.clone(), r.cohort, r.age, r.age_corrected_value))
                .collect(),
        ),
        (
            "baseline",
            baseline
                .iter()
                .map(|r| (r.window.clone(), r.cohort, r.age, r.age_corrected_value))
                .collect(),
        ),
    ];
    // The oracle scores each subject by its true rate, age corrected the same way.
    let mut oracle = Vec::new();
    for w in &cfg.eval.windows {
        let rows: Vec<&ScoreRow> = scores.iter().filter(|r| r.window == w.label()).collect();
        let values: Vec<(CohortLabel, f64, f64)> = rows
            .iter()
            .map(|r| (r.cohort, r.age, rates.get(&r.subject).copied().unwrap_or(f64::NAN)))
            .collect();
        let c = corrected(&values, cfg.score.fit_cohort, w)?;
        oracle.extend(rows.iter().zip(c).map(|(r, c)| (r.window.clone(), r.cohort, r.age, c)));
    }
    methods.push(("oracle", oracle));
    let (groups, sample_size) = group_analysis(&methods, &cfg.eval, cfg.score.fit_cohort, cfg.seed)?;

    let n_test_subjects = pairs
        .iter()
        .map(|p| &p.subject)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let (accepted, rejected) = preprocess_qc_counts(run, stage)?;
    let report = Report {
        n_test_subjects,
        n_test_pairs: pairs.len(),
        qc: QcSummary { accepted, rejected },
        pii_model,
        sto,
        risi,
        sameday,
        intervals,
        groups,
        sample_size,
    };
    info!(
        "STO accuracy {:.3} (AUC {:.3}); baseline {:.3}; RISI {:.3}",
        report.sto.network.accuracy, report.sto.network.auc, report.sto.baseline.accuracy, report.risi.network.accuracy
    );

    let mut spaghetti = Vec::new();
    for p in pairs.iter().filter(|p| p.i == 0) {
        spaghetti.push(SpaghettiRow {
            subject: &p.subject,
            cohort: p.cohort,
            t_days: p.t_j,
            pii: p.pii,
            baseline_change_pct: 100.0 * p.volume_change(),
            true_change_pct: 100.0 * true_change(p)?,
        });
    }
    write(&dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    write(&dir.join(SPAGHETTI_FILE), to_csv(&spaghetti)?)?;
    write(&dir.join(GROUPS_FILE), to_csv(&report.groups)?)?;
    write(&dir.join(SAMPLE_SIZE_FILE), to_csv(&report.sample_size)?)?;
    run.finish(
        stage,
        &[REPORT_FILE, SPAGHETTI_FILE, GROUPS_FILE, SAMPLE_SIZE_FILE],
        started,
    )
}

fn classifier(pred: &[u8], labels: &[u8], scores: &[f64]) -> Result<Classifier> {
    let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    Ok(Classifier {
        accuracy: sto_accuracy(pred, labels)?,
        auc: roc_auc(scores, &truth)?,
        n: pred.len(),
    })
}

fn sto_report(pairs: &[ScoredPair], true_change: &dyn Fn(&ScoredPair) -> Result<f64>) -> Result<StoReport> {
    let labels: Vec<u8> = pairs.iter().map(|p| p.sto_label).collect();
    let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let net_pred: Vec<u8> = pairs.iter().map(|p| p.sto_pred).collect();
    let net_score: Vec<f64> = pairs.iter().map(|p| p.sto_score).collect();
    let base_pred: Vec<u8> = pairs.iter().map(|p| p.baseline_pred).collect();
    let base_score: Vec<f64> = pairs.iter().map(|p| p.baseline_score).collect();
    let mut oracle_pred = Vec::with_capacity(pairs.len());
    for p in pairs {
        let c = true_change(p)?;
        oracle_pred.push(order_from_volume_change(if p.presented_chronological { c } else { -c }));
    }
    let mut by_cohort = BTreeMap::new();
    for label in CohortLabel::ALL {
        let idx: Vec<usize> = (0..pairs.len()).filter(|&k| pairs[k].cohort == label).collect();
        if idx.is_empty() {
            continue;
        }
        let pick = |v: &[u8]| idx.iter().map(|&k| v[k]).collect::<Vec<u8>>();
        by_cohort.insert(
            label.to_string(),
            CohortSto {
                n: idx.len(),
                network_accuracy: sto_accuracy(&pick(&net_pred), &pick(&labels))?,
                baseline_accuracy: sto_accuracy(&pick(&base_pred), &pick(&labels))?,
            },
        );
    }
    Ok(StoReport {
        network: classifier(&net_pred, &labels, &net_score)?,
        baseline: classifier(&base_pred, &labels, &base_score)?,
        oracle_accuracy: sto_accuracy(&oracle_pred, &labels)?,
        delong: delong_test(&net_score, &base_score, &truth)?,
        by_cohort,
    })
}

/// Every two pairs of the same subject, judged by which has the larger
/// magnitude; pairs with equal actual intervals are excluded.
fn risi_report(pairs: &[ScoredPair], true_change: &dyn Fn(&ScoredPair) -> Result<f64>) -> Result<RisiReport> {
    let mut by_subject: BTreeMap<&str, Vec<&ScoredPair>> = BTreeMap::new();
    for p in pairs {
        by_subject.entry(&p.subject).or_default().push(p);
    }
    let (mut net, mut base, mut oracle, mut actual) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ps in by_subject.values() {
        for a in 0..ps.len() {
            for b in a + 1..ps.len() {
                let (p, q) = (ps[a], ps[b]);
                net.push((p.pii, q.pii));
                base.push((p.volume_change(), q.volume_change()));
                oracle.push((true_change(p)?, true_change(q)?));
                actual.push((p.interval(), q.interval()));
            }
        }
    }
    Ok(RisiReport {
        network: risi_accuracy(&net, &actual)?,
        baseline: risi_accuracy(&base, &actual)?,
        oracle: risi_accuracy(&oracle, &actual)?,
    })
}

fn sameday_report(rows: &[SamedayRow]) -> Result<SamedayReport> {
    let n = rows.len();
    if n == 0 {
        return Err(CliError::Data("no same-day pairs were scored".into()));
    }
    let correct = rows.iter().filter(|r| r.pred == r.label).count();
    let positive = rows.iter().filter(|r| r.pred == 1).count();
    let baseline_correct = rows.iter().filter(|r| r.baseline_pred == r.label).count();
    Ok(SamedayReport {
        n,
        correct,
        accuracy: correct as f64 / n as f64,
        p_accuracy: binomial_chance_test(correct as u64, n as u64, 0.5)?,
        positive,
        p_positive: binomial_chance_test(positive as u64, n as u64, 0.5)?,
        baseline_correct,
        p_baseline: binomial_chance_test(baseline_correct as u64, n as u64, 0.5)?,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn r_squared(points: &[(f64, f64)]) -> f64 {
    if points.len() < 3 {
        return f64::NAN;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy * sxy / (sxx * syy)
}

/// Mean PII at each distinct interval with enough pairs.
fn interval_means<'a>(pairs: impl Iterator<Item = &'a ScoredPair>) -> Vec<(f64, f64)> {
    let mut by_dt: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for p in pairs {
        by_dt
            .entry(p.interval().to_bits())
            .or_insert_with(|| (p.interval(), Vec::new()))
            .1
            .push(p.pii);
    }
    let mut out: Vec<(f64, f64)> = by_dt
        .into_values()
        .filter(|(_, v)| v.len() >= MIN_PAIRS_PER_INTERVAL)
        .map(|(dt, v)| (dt, mean(&v)))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn interval_report(pairs: &[ScoredPair], cfg: &crate::config::ExperimentConfig) -> IntervalReport {
    let tol = cfg.eval.bin_tolerance;
    let mut bins = Vec::new();
    for &nominal in &cfg.eval.interval_bins {
        let inside: Vec<&ScoredPair> = pairs
            .iter()
            .filter(|p| (p.interval() - nominal).abs() <= tol * nominal)
            .collect();
        let mut by_cohort = BTreeMap::new();
        for label in CohortLabel::ALL {
            let v: Vec<f64> = inside.iter().filter(|p| p.cohort == label).map(|p| p.pii).collect();
            if !v.is_empty() {
                by_cohort.insert(
                    label.to_string(),
                    BinCohort {
                        n: v.len(),
                        mean_pii: mean(&v),
                    },
                );
            }
        }
        let v: Vec<f64> = inside.iter().map(|p| p.pii).collect();
        bins.push(IntervalBin {
            nominal_days: nominal,
            n: v.len(),
            mean_pii: if v.is_empty() { f64::NAN } else { mean(&v) },
            by_cohort,
        });
    }
    let rising = |means: &[f64]| means.len() >= 2 && means.windows(2).all(|w| w[1] > w[0]);
    let pooled: Vec<f64> = bins.iter().map(|b| b.mean_pii).collect();
    let mut strictly_increasing = rising(&pooled);
    for label in CohortLabel::ALL {
        let m: Vec<f64> = bins
            .iter()
            .map(|b| b.by_cohort.get(label.as_str()).map_or(f64::NAN, |c| c.mean_pii))
            .collect();
        if m.iter().any(|x| !x.is_nan()) {
            strictly_increasing &= rising(&m);
        }
    }
    let finite: Vec<f64> = pooled.iter().copied().filter(|v| v.is_finite()).collect();
    let spread = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().copied().fold(f64::NEG_INFINITY, f64::max) - finite.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let points = interval_means(pairs.iter());
    let mut r2_by_cohort = BTreeMap::new();
    for label in CohortLabel::ALL {
        let pts = interval_means(pairs.iter().filter(|p| p.cohort == label));
        if !pts.is_empty() {
            r2_by_cohort.insert(label.to_string(), Some(r_squared(&pts)).filter(|v| v.is_finite()));
        }
    }
    IntervalReport {
        bins,
        strictly_increasing,
        spread,
        r2: r_squared(&points),
        r2_points: points.len(),
        r2_by_cohort,
    }
}

type MethodScores<'a> = (&'a str, Vec<(String, CohortLabel, f64, f64)>);

fn group_analysis(
    methods: &[MethodScores],
    cfg: &EvalConfig,
    control: CohortLabel,
    seed: u64,
) -> Result<(Vec<GroupRow>, Vec<SampleSizeRow>)> {
    let mut groups = Vec::new();
    let mut sizes = Vec::new();
    for w in &cfg.windows {
        let window = w.label();
        for (method, rows) in methods {
            let values = |label: CohortLabel| -> Vec<f64> {
                rows.iter()
                    .filter(|r| r.0 == window && r.1 == label && r.3.is_finite())
                    .map(|r| r.3)
                    .collect()
            };
            let ctl = values(control);
            for label in CohortLabel::ALL.into_iter().filter(|&l| l != control) {
                let pat = values(label);
                if pat.len() < 2 || ctl.len() < 2 {
                    continue;
                }
                let t = two_sample_t(&pat, &ctl, cfg.welch)?;
                let m = mean(&pat);
                groups.push(GroupRow {
                    window: window.clone(),
                    method: method.to_string(),
                    cohort: label,
                    n: pat.len(),
                    n_control: ctl.len(),
                    mean: m,
                    sd: (pat.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (pat.len() - 1) as f64).sqrt(),
                    control_mean: mean(&ctl),
                    t: t.t,
                    df: t.df,
                    p_value: t.p_value,
                });
                match bootstrap_ci(&pat, &ctl, &cfg.design, cfg.bootstrap_replicates, seed) {
                    Ok(ci) => sizes.push(SampleSizeRow {
                        window: window.clone(),
                        method: method.to_string(),
                        cohort: label,
                        n_estimate: ci.estimate,
                        ci_lo: ci.lo,
                        ci_hi: ci.hi,
                        infinite_replicates: ci.infinite,
                    }),
                    // No excess over controls: no finite trial size.
                    Err(e) => info!("no sample size for {method} {label} in {window}: {e}"),
                }
            }
        }
    }
    Ok((groups, sizes))
}

/// Undefined statistics travel through JSON as `null`.
mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}
