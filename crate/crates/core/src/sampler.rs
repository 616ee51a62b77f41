//! Scan pairs for temporal-order training and nested pairs-of-pairs for
//! relative-interval training.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which registration of a pair is used: `A` has slot 0 as the fixed image,
/// `B` has slot 1 fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.random::<bool>() {
            Variant::A
        } else {
            Variant::B
        }
    }
}

/// One scan of a subject: its index in the subject's time-ordered scan list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRef {
    pub index: usize,
    pub t_days: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPair {
    pub subject: String,
    pub slot0: ScanRef,
    pub slot1: ScanRef,
    /// 1 when slot 1 is the later scan.
    pub sto_label: u8,
    pub variant: Variant,
}

impl ScanPair {
    pub fn new(subject: impl Into<String>, slot0: ScanRef, slot1: ScanRef, variant: Variant) -> Result<Self> {
        if slot0.t_days == slot1.t_days {
            return Err(Error::Config(format!(
                "scan pair needs distinct times, both are day {}",
                slot0.t_days
            )));
        }
        let sto_label = u8::from(slot1.t_days > slot0.t_days);
        Ok(Self {
            subject: subject.into(),
            slot0,
            slot1,
            sto_label,
            variant,
        })
    }

    /// Signed interval `t(slot1) - t(slot0)` in days.
    pub fn signed_interval(&self) -> f64 {
        self.slot1.t_days - self.slot0.t_days
    }

    pub fn interval(&self) -> (f64, f64) {
        let (a, b) = (self.slot0.t_days, self.slot1.t_days);
        (a.min(b), a.max(b))
    }

    pub fn swapped(&self) -> Self {
        Self {
            subject: self.subject.clone(),
            slot0: self.slot1.clone(),
            slot1: self.slot0.clone(),
            sto_label: 1 - self.sto_label,
            variant: match self.variant {
                Variant::A => Variant::B,
                Variant::B => Variant::A,
            },
        }
    }

    /// Scan indices in time order.
    pub fn canonical_indices(&self) -> (usize, usize) {
        if self.slot0.t_days < self.slot1.t_days {
            (self.slot0.index, self.slot1.index)
        } else {
            (self.slot1.index, self.slot0.index)
        }
    }

    pub fn id(&self) -> String {
        let (i, j) = self.canonical_indices();
        format!("{}:{}-{}", self.subject, i, j)
    }
}

/// Ratio bins `[0, 0.5)`, `[0.5, 1)`, `[1, 2)`, `[2, inf)`.
pub fn ratio_category(dt1_days: f64, dt2_days: f64) -> Result<usize> {
    if dt2_days == 0.0 || !dt2_days.is_finite() || !dt1_days.is_finite() {
        return Err(Error::Numerical(format!(
            "interval ratio undefined for dt1={dt1_days}, dt2={dt2_days}"
        )));
    }
    let r = dt1_days.abs() / dt2_days.abs();
    Ok(if r < 0.5 {
        0
    } else if r < 1.0 {
        1
    } else if r < 2.0 {
        2
    } else {
        3
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestedQuad {
    pub pair1: ScanPair,
    pub pair2: ScanPair,
    pub ratio: f64,
    pub category: usize,
}

impl NestedQuad {
    pub fn new(pair1: ScanPair, pair2: ScanPair) -> Result<Self> {
        if pair1.subject != pair2.subject {
            return Err(Error::Config("nested quad mixes subjects".into()));
        }
        if !is_nested(pair1.interval(), pair2.interval()) {
            return Err(Error::Config(format!(
                "intervals {:?} and {:?} are not strictly nested",
                pair1.interval(),
                pair2.interval()
            )));
        }
        let (d1, d2) = (pair1.signed_interval(), pair2.signed_interval());
        let category = ratio_category(d1, d2)?;
        Ok(Self {
            ratio: d1.abs() / d2.abs(),
            category,
            pair1,
            pair2,
        })
    }
}

/// One closed interval lies inside the other and they differ in length.
/// Shared endpoints are allowed.
pub fn is_nested(a: (f64, f64), b: (f64, f64)) -> bool {
    let la = a.1 - a.0;
    let lb = b.1 - b.0;
    if la == lb {
        return false;
    }
    let (short, long) = if la < lb { (a, b) } else { (b, a) };
    short.0 >= long.0 && short.1 <= long.1
}

fn random_order<R: Rng + ?Sized>(subject: &str, a: &ScanRef, b: &ScanRef, rng: &mut R) -> Result<ScanPair> {
    let (s0, s1) = if rng.random::<bool>() { (a, b) } else { (b, a) };
    ScanPair::new(subject, s0.clone(), s1.clone(), Variant::A)
}

/// Every unordered pair of scans once, slot order uniformly random.
pub fn enumerate_pairs<R: Rng + ?Sized>(subject: &str, scans: &[ScanRef], rng: &mut R) -> Result<Vec<ScanPair>> {
    let mut out = Vec::new();
    for i in 0..scans.len() {
        for j in i + 1..scans.len() {
            out.push(random_order(subject, &scans[i], &scans[j], rng)?);
        }
    }
    Ok(out)
}

/// Every unordered combination of two strictly nested scan pairs, with the
/// roles of `pair1`/`pair2` and the slot order inside each pair randomised.
pub fn enumerate_nested_quads<R: Rng + ?Sized>(
    subject: &str,
    scans: &[ScanRef],
    rng: &mut R,
) -> Result<Vec<NestedQuad>> {
    if scans.len() < 3 {
        return Ok(Vec::new());
    }
    let mut intervals = Vec::new();
    for i in 0..scans.len() {
        for j in i + 1..scans.len() {
            intervals.push((i, j));
        }
    }
    let iv = |&(i, j): &(usize, usize)| {
        let (a, b) = (scans[i].t_days, scans[j].t_days);
        (a.min(b), a.max(b))
    };
    let mut out = Vec::new();
    for p in 0..intervals.len() {
        for q in p + 1..intervals.len() {
            if !is_nested(iv(&intervals[p]), iv(&intervals[q])) {
                continue;
            }
            let (x, y) = if rng.random::<bool>() { (p, q) } else { (q, p) };
            let (a, b) = intervals[x];
            let (c, d) = intervals[y];
            let pair1 = random_order(subject, &scans[a], &scans[b], rng)?;
            let pair2 = random_order(subject, &scans[c], &scans[d], rng)?;
            out.push(NestedQuad::new(pair1, pair2)?);
        }
    }
    Ok(out)
}

/// Audit CSV: `subject,t_a,t_b,label,variant,category` (category empty for pairs).
pub fn pairs_to_csv(pairs: &[ScanPair]) -> String {
    let mut s = String::from("subject,t_a,t_b,label,variant,category\n");
    for p in pairs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},",
            p.subject,
            p.slot0.t_days,
            p.slot1.t_days,
            p.sto_label,
            p.variant.as_str()
        );
    }
    s
}

/// Audit CSV with two rows per quad sharing the quad's category.
pub fn quads_to_csv(quads: &[NestedQuad]) -> String {
    let mut s = String::from("subject,t_a,t_b,label,variant,category\n");
    for q in quads {
        for p in [&q.pair1, &q.pair2] {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                p.subject,
                p.slot0.t_days,
                p.slot1.t_days,
                p.sto_label,
                p.variant.as_str(),
                q.category
            );
        }
    }
    s
}

pub fn scan_refs(days: &[f64]) -> Vec<ScanRef> {
    days.iter()
        .enumerate()
        .map(|(index, &t_days)| ScanRef { index, t_days })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pair_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            enumerate_pairs("s", &scan_refs(&[0.0, 365.0]), &mut rng).unwrap().len(),
            1
        );
        assert_eq!(
            enumerate_pairs("s", &scan_refs(&[0.0, 1.0, 2.0, 3.0]), &mut rng)
                .unwrap()
                .len(),
            6
        );
        assert!(enumerate_pairs("s", &scan_refs(&[0.0]), &mut rng).unwrap().is_empty());
    }

    #[test]
    fn labels_follow_slot_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in enumerate_pairs("s", &scan_refs(&[0.0, 90.0, 400.0, 800.0]), &mut rng).unwrap() {
            assert_eq!(p.sto_label == 1, p.slot1.t_days > p.slot0.t_days);
            let s = p.swapped();
            assert_eq!(s.sto_label, 1 - p.sto_label);
            assert_eq!(s.signed_interval(), -p.signed_interval());
        }
    }

    #[test]
    fn equal_times_rejected() {
        let r = ScanRef { index: 0, t_days: 5.0 };
        assert!(ScanPair::new("s", r.clone(), ScanRef { index: 1, t_days: 5.0 }, Variant::A).is_err());
    }

    #[test]
    fn slot_order_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scans = scan_refs(&[0.0, 1.0]);
        let n = 10_000;
        let flipped = (0..n)
            .filter(|_| enumerate_pairs("s", &scans, &mut rng).unwrap()[0].sto_label == 0)
            .count();
        let f = flipped as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn ratio_bins() {
        assert_eq!(ratio_category(365.0, 730.0).unwrap(), 1);
        assert_eq!(ratio_category(365.0, 365.0).unwrap(), 2);
        assert_eq!(ratio_category(1826.0, 365.0).unwrap(), 3);
        assert_eq!(ratio_category(-100.0, 1000.0).unwrap(), 0);
        assert_eq!(ratio_category(2.0, 1.0).unwrap(), 3);
        assert!(ratio_category(1.0, 0.0).is_err());
    }

    #[test]
    fn two_scans_no_quads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(enumerate_nested_quads("s", &scan_refs(&[0.0, 365.0]), &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn nesting_predicate() {
        assert!(is_nested((0.0, 1.0), (0.0, 5.0)));
        assert!(is_nested((2.0, 3.0), (0.0, 5.0)));
        assert!(!is_nested((0.0, 1.0), (2.0, 5.0)));
        assert!(!is_nested((0.0, 1.0), (0.0, 1.0)));
        assert!(!is_nested((0.0, 3.0), (1.0, 5.0)));
    }

    #[test]
    fn csv_headers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scans = scan_refs(&[0.0, 365.0, 730.0]);
        let quads = enumerate_nested_quads("s", &scans, &mut rng).unwrap();
        let csv = quads_to_csv(&quads);
        assert!(csv.starts_with("subject,t_a,t_b,label,variant,category\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * quads.len());
        let pcsv = pairs_to_csv(&enumerate_pairs("s", &scans, &mut rng).unwrap());
        assert_eq!(pcsv.lines().count(), 4);
    }
}
