//! Automatic evaluation: BLEU-1/2/3, CIDEr, Distinct-1/2, avgLen, and
//! two-sided Welch t-tests for significance marking.
//!
//! All metrics lowercase and whitespace-split their inputs. Corpus BLEU is
//! the clipped n-gram precision with the brevity penalty; the sentence-level
//! variant (used for the per-sample t-test vectors) applies add-one smoothing
//! on orders >= 2. CIDEr follows the standard implementation: TF-IDF vectors
//! over n = 1..4 with reference-side document frequencies, min-clipped
//! numerator, cosine normalization, times 10.

use std::collections::HashMap;

use crate::error::{Error, Result};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n && n >= 1 {
        for w in tokens.windows(n) {
            *map.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    map
}

fn check_aligned(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::MetricInput("empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::MisalignedCorpora {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    Ok(())
}

/// Corpus-level BLEU-n (x100): geometric mean of clipped precisions over
/// orders 1..=n times the brevity penalty.
pub fn bleu_n(hyps: &[String], refs: &[String], n: usize) -> Result<f64> {
    check_aligned(hyps, refs)?;
    if n == 0 {
        return Err(Error::MetricInput("BLEU order must be >= 1".into()));
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs.iter()) {
        let ht = toks(h);
        let rt = toks(r);
        hyp_len += ht.len();
        ref_len += rt.len();
        for k in 1..=n {
            let hg = ngrams(&ht, k);
            let rg = ngrams(&rt, k);
            for (g, &c) in &hg {
                totals[k - 1] += c;
                if let Some(&rc) = rg.get(g) {
                    matches[k - 1] += c.min(rc);
                }
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for k in 0..n {
        if totals[k] == 0 || matches[k] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[k] as f64 / totals[k] as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(100.0 * precision * bp)
}

/// Sentence-level BLEU-n (x100) with add-one smoothing on orders >= 2.
pub fn sentence_bleu_n(hyp: &str, reference: &str, n: usize) -> f64 {
    let ht = toks(hyp);
    let rt = toks(reference);
    if ht.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0f64;
    for k in 1..=n {
        let hg = ngrams(&ht, k);
        let rg = ngrams(&rt, k);
        let total: usize = hg.values().sum();
        let matched: usize = hg
            .iter()
            .map(|(g, &c)| rg.get(g).map_or(0, |&rc| c.min(rc)))
            .sum();
        let (num, den) = if k >= 2 {
            (matched as f64 + 1.0, total as f64 + 1.0)
        } else {
            (matched as f64, total as f64)
        };
        if den == 0.0 || num == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln();
    }
    let precision = (log_sum / n as f64).exp();
    let bp = (1.0 - rt.len() as f64 / ht.len() as f64).min(0.0).exp();
    100.0 * precision * bp
}

/// Proportion of unique n-grams across all hypotheses. Defined as 0 (with a
/// warning) when every hypothesis is shorter than `n`.
pub fn distinct_n(hyps: &[String], n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::MetricInput("empty corpus".into()));
    }
    let mut unique = std::collections::HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        let t = toks(h);
        if t.len() >= n {
            for w in t.windows(n) {
                unique.insert(w.to_vec());
                total += 1;
            }
        }
    }
    if total == 0 {
        log::warn!("distinct-{n}: every hypothesis is shorter than {n} tokens");
        return Ok(0.0);
    }
    Ok(unique.len() as f64 / total as f64)
}

const CIDER_N: usize = 4;

fn cider_scores(hyps: &[String], refs: &[String]) -> Result<Vec<f64>> {
    check_aligned(hyps, refs)?;
    let n_docs = refs.len() as f64;
    // reference-side document frequencies per n-gram order
    let mut df: Vec<HashMap<Vec<String>, usize>> = vec![HashMap::new(); CIDER_N];
    for r in refs {
        let rt = toks(r);
        for k in 1..=CIDER_N {
            for g in ngrams(&rt, k).keys() {
                *df[k - 1].entry(g.clone()).or_insert(0) += 1;
            }
        }
    }
    let idf = |k: usize, g: &Vec<String>| -> f64 {
        let d = df[k - 1].get(g).copied().unwrap_or(0).max(1) as f64;
        n_docs.ln() - d.ln()
    };
    let mut out = Vec::with_capacity(hyps.len());
    for (h, r) in hyps.iter().zip(refs.iter()) {
        let ht = toks(h);
        let rt = toks(r);
        let mut acc = 0.0f64;
        for k in 1..=CIDER_N {
            let hg = ngrams(&ht, k);
            let rg = ngrams(&rt, k);
            let mut dotv = 0.0f64;
            let mut norm_h = 0.0f64;
            let mut norm_r = 0.0f64;
            for (g, &c) in &hg {
                let w = c as f64 * idf(k, g);
                norm_h += w * w;
                if let Some(&rc) = rg.get(g) {
                    let hw = (c.min(rc)) as f64 * idf(k, g);
                    let rw = rc as f64 * idf(k, g);
                    dotv += hw * rw;
                }
            }
            for (g, &c) in &rg {
                let w = c as f64 * idf(k, g);
                norm_r += w * w;
            }
            if norm_h > 0.0 && norm_r > 0.0 {
                acc += dotv / (norm_h.sqrt() * norm_r.sqrt());
            }
        }
        out.push(10.0 * acc / CIDER_N as f64);
    }
    Ok(out)
}

/// Corpus CIDEr: per-pair TF-IDF cosine (min-clipped), averaged over
/// n = 1..4, times 10, averaged over the corpus.
pub fn cider(hyps: &[String], refs: &[String]) -> Result<f64> {
    let scores = cider_scores(hyps, refs)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean whitespace-token count.
pub fn avg_len(hyps: &[String]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::MetricInput("empty corpus".into()));
    }
    let total: usize = hyps.iter().map(|h| toks(h).len()).sum();
    Ok(total as f64 / hyps.len() as f64)
}

// ---- Welch t-test ----

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

fn betacf(a: f64, b: f64, x: f64) -> f64 {
    // continued fraction for the incomplete beta (Lentz)
    const MAX_IT: usize = 200;
    const EPS: f64 = 3.0e-14;
    const FPMIN: f64 = 1.0e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_IT {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let bt = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Two-sample Welch t-test with a two-sided p-value.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::MetricInput("t-test needs at least 2 samples per side".into()));
    }
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / (nb - 1.0);
    let sea = va / na;
    let seb = vb / nb;
    if sea + seb == 0.0 {
        // degenerate: both samples constant
        return if ma == mb {
            Ok(TTestResult { t: 0.0, p: 1.0, df: na + nb - 2.0 })
        } else {
            log::warn!("t-test on zero-variance samples with unequal means");
            Ok(TTestResult {
                t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                p: 0.0,
                df: na + nb - 2.0,
            })
        };
    }
    let t = (ma - mb) / (sea + seb).sqrt();
    let df = (sea + seb) * (sea + seb) / (sea * sea / (na - 1.0) + seb * seb / (nb - 1.0));
    let x = df / (df + t * t);
    let p = reg_inc_beta(df / 2.0, 0.5, x);
    Ok(TTestResult { t, p, df })
}

/// Significance stars: `**` for p < 0.01, `*` for p < 0.05, `/` otherwise.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "/"
    }
}

/// Per-sample sentence-level score vectors backing the t-tests.
#[derive(Clone, Debug, Default)]
pub struct PerSample {
    pub bleu1: Vec<f64>,
    pub bleu2: Vec<f64>,
    pub bleu3: Vec<f64>,
    pub cider: Vec<f64>,
    pub distinct1: Vec<f64>,
    pub distinct2: Vec<f64>,
    pub len: Vec<f64>,
}

/// Corpus metrics plus the per-sample vectors.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub cider: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub avg_len: f64,
    pub samples: usize,
    pub per_sample: PerSample,
}

pub const COLUMNS: [&str; 7] = [
    "BLEU-1", "BLEU-2", "BLEU-3", "CIDEr", "Dist-1", "Dist-2", "avgLen",
];

impl MetricsReport {
    pub fn column_values(&self) -> [f64; 7] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.cider,
            self.distinct1,
            self.distinct2,
            self.avg_len,
        ]
    }

    /// Per-sample vector backing each starred column (avgLen is unstarred).
    pub fn column_samples(&self, col: usize) -> Option<&[f64]> {
        match col {
            0 => Some(&self.per_sample.bleu1),
            1 => Some(&self.per_sample.bleu2),
            2 => Some(&self.per_sample.bleu3),
            3 => Some(&self.per_sample.cider),
            4 => Some(&self.per_sample.distinct1),
            5 => Some(&self.per_sample.distinct2),
            _ => None,
        }
    }

    /// Aligned one-row plain-text table.
    pub fn render_table(&self, label: &str) -> String {
        let mut head = format!("{:<12}", "Model");
        for c in COLUMNS {
            head.push_str(&format!("{c:>9}"));
        }
        let mut row = format!("{label:<12}");
        for v in self.column_values() {
            row.push_str(&format!("{v:>9.3}"));
        }
        format!("{head}\n{row}\n")
    }

    /// Machine-readable `key=value` lines.
    pub fn render_keyvalues(&self) -> String {
        format!(
            "bleu1={:.4}\nbleu2={:.4}\nbleu3={:.4}\ncider={:.4}\ndist1={:.4}\ndist2={:.4}\navg_len={:.4}\nsamples={}\n",
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.cider,
            self.distinct1,
            self.distinct2,
            self.avg_len,
            self.samples
        )
    }
}

fn per_sample_distinct(hyp: &str, n: usize) -> f64 {
    let t = toks(hyp);
    if t.len() < n {
        return 0.0;
    }
    let mut unique = std::collections::HashSet::new();
    let mut total = 0usize;
    for w in t.windows(n) {
        unique.insert(w.to_vec());
        total += 1;
    }
    unique.len() as f64 / total as f64
}

/// Fills every report field in one pass over aligned corpora.
pub fn evaluate(hyps: &[String], refs: &[String]) -> Result<MetricsReport> {
    check_aligned(hyps, refs)?;
    let cid = cider_scores(hyps, refs)?;
    let per_sample = PerSample {
        bleu1: hyps
            .iter()
            .zip(refs.iter())
            .map(|(h, r)| sentence_bleu_n(h, r, 1))
            .collect(),
        bleu2: hyps
            .iter()
            .zip(refs.iter())
            .map(|(h, r)| sentence_bleu_n(h, r, 2))
            .collect(),
        bleu3: hyps
            .iter()
            .zip(refs.iter())
            .map(|(h, r)| sentence_bleu_n(h, r, 3))
            .collect(),
        cider: cid.clone(),
        distinct1: hyps.iter().map(|h| per_sample_distinct(h, 1)).collect(),
        distinct2: hyps.iter().map(|h| per_sample_distinct(h, 2)).collect(),
        len: hyps.iter().map(|h| toks(h).len() as f64).collect(),
    };
    Ok(MetricsReport {
        bleu1: bleu_n(hyps, refs, 1)?,
        bleu2: bleu_n(hyps, refs, 2)?,
        bleu3: bleu_n(hyps, refs, 3)?,
        cider: cid.iter().sum::<f64>() / cid.len() as f64,
        distinct1: distinct_n(hyps, 1)?,
        distinct2: distinct_n(hyps, 2)?,
        avg_len: avg_len(hyps)?,
        samples: hyps.len(),
        per_sample,
    })
}

/// Comparison table: one row per labeled report, significance stars from
/// pairwise t-tests against the best performer per column (the best cell is
/// unmarked; avgLen carries no stars).
pub fn render_comparison(rows: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{:<12}", "Model");
    for c in COLUMNS {
        out.push_str(&format!("{c:>14}"));
    }
    out.push('\n');
    // best per starred column
    let mut best_idx = [0usize; 6];
    for col in 0..6 {
        let mut best = f64::NEG_INFINITY;
        for (i, (_, r)) in rows.iter().enumerate() {
            let v = r.column_values()[col];
            if v > best {
                best = v;
                best_idx[col] = i;
            }
        }
    }
    for (i, (label, r)) in rows.iter().enumerate() {
        out.push_str(&format!("{label:<12}"));
        let values = r.column_values();
        for (col, v) in values.iter().enumerate() {
            if col == 6 {
                out.push_str(&format!("{v:>14.3}"));
                continue;
            }
            let mark = if rows.len() < 2 || i == best_idx[col] {
                String::new()
            } else {
                let best = &rows[best_idx[col]].1;
                let (sa, sb) = (
                    r.column_samples(col).unwrap(),
                    best.column_samples(col).unwrap(),
                );
                match t_test(sa, sb) {
                    Ok(t) => format!(" ({})", significance_stars(t.p)),
                    Err(_) => " (/)".to_string(),
                }
            };
            out.push_str(&format!("{:>14}", format!("{v:.3}{mark}")));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bleu_identity_is_exactly_100() {
        let c = s(&["a b c", "d e f g"]);
        for n in 1..=3 {
            assert_eq!(bleu_n(&c, &c, n).unwrap(), 100.0);
        }
    }

    #[test]
    fn bleu_fixture() {
        let h = s(&["a b c"]);
        let r = s(&["a b d"]);
        assert!((bleu_n(&h, &r, 1).unwrap() - 66.67).abs() < 0.01);
        assert!((bleu_n(&h, &r, 2).unwrap() - 57.74).abs() < 0.01);
    }

    #[test]
    fn bleu_disjoint_and_empty() {
        let h = s(&["x y"]);
        let r = s(&["a b"]);
        assert_eq!(bleu_n(&h, &r, 1).unwrap(), 0.0);
        let h = s(&["", "a"]);
        let r = s(&["a", "a"]);
        // empty hypothesis contributes zero matches, not an exception
        assert!(bleu_n(&h, &r, 1).is_ok());
    }

    #[test]
    fn distinct_fixtures() {
        let h = s(&["a b a", "b c"]);
        assert!((distinct_n(&h, 1).unwrap() - 0.6).abs() < 1e-12);
        let same = s(&["a", "a", "a", "a"]);
        assert!((distinct_n(&same, 1).unwrap() - 0.25).abs() < 1e-12);
        let disjoint = s(&["a b", "c d"]);
        assert_eq!(distinct_n(&disjoint, 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&s(&["a"]), 2).unwrap(), 0.0);
    }

    #[test]
    fn cider_fixtures() {
        // identical pairs with disjoint references: cosine 1 at every order
        let c = s(&["the red robot sees a cloud", "a quiet cat guards the lamp", "pilots find tall stones here"]);
        let score = cider(&c, &c).unwrap();
        assert!((score - 10.0).abs() < 1e-6, "{score}");

        let h = s(&["x y z w", "p q r t"]);
        let r = s(&["a b c d", "e f g h"]);
        assert_eq!(cider(&h, &r).unwrap(), 0.0);

        // identical references everywhere: idf = ln(N/N) = 0 -> zero vectors
        let same = s(&["a b c d", "a b c d"]);
        assert_eq!(cider(&same, &same).unwrap(), 0.0);
    }

    #[test]
    fn avg_len_fixtures() {
        assert_eq!(avg_len(&s(&["a b", "a"])).unwrap(), 1.5);
        assert_eq!(avg_len(&s(&["a b c d e f g"])).unwrap(), 7.0);
    }

    #[test]
    fn t_test_fixtures() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let r = t_test(&a, &b).unwrap();
        assert!((r.t + 1.0).abs() < 1e-9);
        assert!((r.df - 8.0).abs() < 1e-9);
        assert!((r.p - 0.3466).abs() < 0.01, "p={}", r.p);

        let same = t_test(&a, &a).unwrap();
        assert_eq!(same.t, 0.0);
        assert!((same.p - 1.0).abs() < 1e-12);

        // antisymmetry
        let swapped = t_test(&b, &a).unwrap();
        assert!((swapped.t - 1.0).abs() < 1e-9);

        // zero-variance edge cases
        let z1 = t_test(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(z1.p, 1.0);
        let z2 = t_test(&[2.0, 2.0], &[3.0, 3.0]).unwrap();
        assert_eq!(z2.p, 0.0);
    }

    #[test]
    fn t_test_extra_scipy_checks() {
        // scipy.stats.ttest_ind(equal_var=False): t=-2.5547, p=0.030625, df=9.1288
        let a = [1.1, 2.3, 0.7, 1.9, 2.8, 1.5];
        let b = [2.0, 3.1, 2.9, 3.5, 2.2, 2.6];
        let r = t_test(&a, &b).unwrap();
        assert!((r.t + 2.5546954).abs() < 1e-5, "t={}", r.t);
        assert!((r.df - 9.1288247).abs() < 1e-5, "df={}", r.df);
        assert!((r.p - 0.0306246).abs() < 1e-5, "p={}", r.p);
    }

    #[test]
    fn stars() {
        assert_eq!(significance_stars(0.03), "*");
        assert_eq!(significance_stars(0.005), "**");
        assert_eq!(significance_stars(0.5), "/");
        assert_eq!(significance_stars(0.004), "**");
    }

    #[test]
    fn evaluate_identity_corpus() {
        let c = s(&["a b c", "d e f", "g h i j"]);
        let r = evaluate(&c, &c).unwrap();
        assert_eq!(r.bleu1, 100.0);
        assert_eq!(r.bleu2, 100.0);
        assert_eq!(r.bleu3, 100.0);
        assert!((r.avg_len - 10.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.samples, 3);
        assert_eq!(r.per_sample.bleu1.len(), 3);
        let err = evaluate(&c, &c[..2].to_vec());
        assert!(matches!(err, Err(Error::MisalignedCorpora { .. })));
    }

    #[test]
    fn report_renders_in_table_order() {
        let c = s(&["a b c", "d e f"]);
        let r = evaluate(&c, &c).unwrap();
        let table = r.render_table("Trans-AR");
        let header = table.lines().next().unwrap();
        let mut last = 0;
        for col in COLUMNS {
            let pos = header.find(col).unwrap();
            assert!(pos > last || col == "BLEU-1");
            last = pos;
        }
        let kv = r.render_keyvalues();
        assert!(kv.contains("bleu1=100.0000"));
        assert!(kv.contains("avg_len="));
    }

    #[test]
    fn comparison_stars_against_best() {
        let good = s(&["a b c d", "e f g h"]);
        let bad = s(&["x y", "z w"]);
        let refs = s(&["a b c d", "e f g h"]);
        let r1 = evaluate(&good, &refs).unwrap();
        let r2 = evaluate(&bad, &refs).unwrap();
        let table = render_comparison(&[("good".into(), r1.clone()), ("bad".into(), r2)]);
        assert!(table.contains("good"));
        assert!(table.contains("(")); // some mark on the non-best row
        // identical rows: all cells unstarred
        let t2 = render_comparison(&[("a".into(), r1.clone()), ("b".into(), r1)]);
        assert!(!t2.contains("(*"));
    }

    proptest! {
        #[test]
        fn bleu_is_permutation_invariant(seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let words = ["a", "b", "c", "d", "e"];
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
                let len = rng.gen_range(1..6);
                (0..len).map(|_| words[rng.gen_range(0..5)]).collect::<Vec<_>>().join(" ")
            };
            let hyps: Vec<String> = (0..6).map(|_| mk(&mut rng)).collect();
            let refs: Vec<String> = (0..6).map(|_| mk(&mut rng)).collect();
            let b = bleu_n(&hyps, &refs, 2).unwrap();
            let mut perm: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let ph: Vec<String> = perm.iter().map(|&i| hyps[i].clone()).collect();
            let pr: Vec<String> = perm.iter().map(|&i| refs[i].clone()).collect();
            let b2 = bleu_n(&ph, &pr, 2).unwrap();
            prop_assert!((b - b2).abs() < 1e-9);
        }

        #[test]
        fn bleu_orders_are_monotone(seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let words = ["a", "b", "c", "d"];
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
                let len = rng.gen_range(3..8);
                (0..len).map(|_| words[rng.gen_range(0..4)]).collect::<Vec<_>>().join(" ")
            };
            let hyps: Vec<String> = (0..8).map(|_| mk(&mut rng)).collect();
            let refs: Vec<String> = (0..8).map(|_| mk(&mut rng)).collect();
            let b1 = bleu_n(&hyps, &refs, 1).unwrap();
            let b2 = bleu_n(&hyps, &refs, 2).unwrap();
            let b3 = bleu_n(&hyps, &refs, 3).unwrap();
            prop_assert!(b3 <= b2 + 1e-9);
            prop_assert!(b2 <= b1 + 1e-9);
        }

        #[test]
        fn distinct_is_one_iff_no_repeats(seed in 0u64..80) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let words = ["a", "b", "c", "d", "e", "f"];
            let hyps: Vec<String> = (0..3)
                .map(|_| {
                    let len = rng.gen_range(1..4);
                    (0..len).map(|_| words[rng.gen_range(0..6)]).collect::<Vec<_>>().join(" ")
                })
                .collect();
            let d = distinct_n(&hyps, 1).unwrap();
            let mut all: Vec<String> = Vec::new();
            for h in &hyps {
                all.extend(h.split_whitespace().map(|w| w.to_string()));
            }
            let unique: std::collections::HashSet<_> = all.iter().collect();
            let no_repeat = unique.len() == all.len();
            prop_assert_eq!(d == 1.0, no_repeat);
            prop_assert!(d > 0.0 && d <= 1.0);
        }
    }
}
