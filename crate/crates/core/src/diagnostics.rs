//! Post-hoc analysis: return attribution, prediction similarity, attention
//! alignment and conditional strategy similarity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backtest::{select_top_k, PortfolioRun};
use crate::data::{MarketPanel, MA5_CHANNEL};
use crate::error::{Error, Result};
use crate::model::ForwardArtifacts;
use crate::priors::{BiasGroup, PriorKind};
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub alpha: f64,
    pub beta: f64,
    pub r2: f64,
    pub t_alpha: f64,
    /// One-tailed, for `alpha > 0`.
    pub p_value: f64,
    pub n: usize,
}

/// OLS of `y = α + βx + e`.
pub fn ols_attribution(y: &[f64], x: &[f64]) -> Result<AttributionResult> {
    let n = y.len();
    if x.len() != n {
        return Err(Error::config(format!(
            "series lengths differ: {n} vs {}",
            x.len()
        )));
    }
    if n < 3 {
        return Err(Error::data(format!(
            "attribution needs at least 3 observations, got {n}"
        )));
    }
    let (mx, my) = (stats::mean(x), stats::mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Undefined("regressor has zero variance".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - alpha - beta * a).powi(2))
        .sum();
    let sst: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let r2 = if sst > 0.0 {
        (1.0 - sse / sst).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let df = (n - 2) as f64;
    let se = (sse / df * (1.0 / n as f64 + mx * mx / sxx)).sqrt();
    let t_alpha = if se > 0.0 {
        alpha / se
    } else if alpha == 0.0 {
        0.0
    } else {
        alpha.signum() * f64::INFINITY
    };
    Ok(AttributionResult {
        alpha,
        beta,
        r2,
        t_alpha,
        p_value: stats::t_upper_tail(t_alpha, df),
        n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSimilarity {
    /// Mean daily Spearman per teacher.
    pub per_teacher: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Days dropped because one side was constant, summed over teachers.
    pub skipped_days: usize,
}

/// `teachers[j][d]` against `student[d]`.
pub fn teacher_student_rank_similarity(
    student: &[Vec<f64>],
    teachers: &[Vec<Vec<f64>>],
) -> Result<RankSimilarity> {
    if teachers.is_empty() {
        return Err(Error::config("no teacher predictions"));
    }
    let mut skipped = 0;
    let mut per_teacher = Vec::with_capacity(teachers.len());
    for (j, t) in teachers.iter().enumerate() {
        if t.len() != student.len() {
            return Err(Error::config(format!(
                "teacher {j} covers {} days, student {}",
                t.len(),
                student.len()
            )));
        }
        let rhos: Vec<f64> = t
            .iter()
            .zip(student)
            .filter_map(|(a, b)| {
                let r = stats::spearman(a, b);
                skipped += r.is_none() as usize;
                r
            })
            .collect();
        if rhos.is_empty() {
            return Err(Error::Undefined(format!(
                "teacher {j}: no day with non-constant predictions"
            )));
        }
        per_teacher.push(stats::mean(&rhos));
    }
    Ok(RankSimilarity {
        mean: stats::mean(&per_teacher),
        std: stats::sample_std(&per_teacher),
        per_teacher,
        skipped_days: skipped,
    })
}

/// Nearest-neighbour resize of a row-major `from x from` map.
pub fn upsample_map(map: &[f64], from: usize, to: usize) -> Vec<f64> {
    let mut out = vec![0.0; to * to];
    for i in 0..to {
        let si = i * from / to;
        for j in 0..to {
            out[i * to + j] = map[si * from + j * from / to];
        }
    }
    out
}

/// Portfolio-weighted attention of the selected stocks, flattened over
/// layers x heads x tokens x tokens and resized to `tokens` per side.
pub fn portfolio_attention(
    attention: &[crate::tensor::Tensor],
    selected: &[usize],
    weights: &[f64],
    tokens: usize,
) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in attention {
        let sh = layer.shape();
        let (h, t) = (sh[1], sh[2]);
        let mut acc = vec![0.0; h * tokens * tokens];
        for (&s, &w) in selected.iter().zip(weights) {
            for head in 0..h {
                let off = (s * h + head) * t * t;
                let map = &layer.data()[off..off + t * t];
                let resized;
                let src = if t == tokens {
                    map
                } else {
                    resized = upsample_map(map, t, tokens);
                    &resized
                };
                let dst = &mut acc[head * tokens * tokens..(head + 1) * tokens * tokens];
                for (a, v) in dst.iter_mut().zip(src) {
                    *a += w * v;
                }
            }
        }
        out.extend(acc);
    }
    out
}

pub const AVERAGE_TEACHER: &str = "average-teacher";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTable {
    /// Fraction of days on which each candidate is the nearest; keys are the
    /// bias-group names plus [`AVERAGE_TEACHER`].
    pub fractions: BTreeMap<String, f64>,
    pub days: usize,
}

/// Assigns each day's student vector to the most cosine-similar candidate:
/// each present bias group's mean teacher vector, then the mean of all
/// teachers. Ties go to the earlier candidate.
pub fn alignment_from_vectors(
    student: &[Vec<f64>],
    teachers: &[(PriorKind, Vec<Vec<f64>>)],
) -> Result<AlignmentTable> {
    if teachers.is_empty() || student.is_empty() {
        return Err(Error::config(
            "attention alignment needs a student and at least one teacher",
        ));
    }
    let days = student.len();
    if teachers.iter().any(|(_, v)| v.len() != days) {
        return Err(Error::config(
            "teacher attention covers a different number of days",
        ));
    }
    let mean_of = |members: &[&Vec<Vec<f64>>], d: usize| -> Vec<f64> {
        let mut acc = vec![0.0; members[0][d].len()];
        for m in members {
            for (a, v) in acc.iter_mut().zip(&m[d]) {
                *a += v;
            }
        }
        let n = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    };
    let mut candidates: Vec<(String, Vec<&Vec<Vec<f64>>>)> = BiasGroup::ALL
        .iter()
        .map(|g| {
            let members: Vec<_> = teachers
                .iter()
                .filter(|(k, _)| k.group() == *g)
                .map(|(_, v)| v)
                .collect();
            (g.name().to_string(), members)
        })
        .filter(|(_, m)| !m.is_empty())
        .collect();
    candidates.push((
        AVERAGE_TEACHER.into(),
        teachers.iter().map(|(_, v)| v).collect(),
    ));
    let mut counts = vec![0usize; candidates.len()];
    for (d, sv) in student.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (c, (_, members)) in candidates.iter().enumerate() {
            let v = mean_of(members, d);
            if v.len() != sv.len() {
                return Err(Error::config(format!(
                    "attention vector sizes differ on day {d}: {} vs {}",
                    v.len(),
                    sv.len()
                )));
            }
            if let Some(cos) = stats::cosine(sv, &v) {
                if best.is_none_or(|(_, b)| cos > b) {
                    best = Some((c, cos));
                }
            }
        }
        let (c, _) =
            best.ok_or_else(|| Error::Undefined(format!("no comparable attention on day {d}")))?;
        counts[c] += 1;
    }
    let fractions = candidates
        .iter()
        .zip(&counts)
        .map(|((name, _), &n)| (name.clone(), n as f64 / days as f64))
        .collect();
    Ok(AlignmentTable { fractions, days })
}

/// Per day, weights every model's attention by the student's top-`k`
/// portfolio and assigns the student to its nearest teacher group.
pub fn attention_alignment(
    student: &[ForwardArtifacts],
    teachers: &[(PriorKind, Vec<ForwardArtifacts>)],
    k: usize,
    tokens: usize,
) -> Result<AlignmentTable> {
    let mut sv = Vec::with_capacity(student.len());
    let mut picks = Vec::with_capacity(student.len());
    for art in student {
        if k > art.logits.len() {
            return Err(Error::config(format!(
                "k = {k} exceeds {} stocks",
                art.logits.len()
            )));
        }
        let (sel, w) = select_top_k(&art.logits, k);
        sv.push(portfolio_attention(&art.attention, &sel, &w, tokens));
        picks.push((sel, w));
    }
    let tv: Vec<(PriorKind, Vec<Vec<f64>>)> = teachers
        .iter()
        .map(|(kind, arts)| {
            let v = arts
                .iter()
                .zip(&picks)
                .map(|(a, (sel, w))| portfolio_attention(&a.attention, sel, w, tokens))
                .collect();
            (*kind, v)
        })
        .collect();
    alignment_from_vectors(&sv, &tv)
}

/// Portfolio-weighted MA5 sequence `z_d` of one day's selection.
pub fn strategy_vector(
    panel: &MarketPanel,
    day: usize,
    lookback: usize,
    selected: &[usize],
    weights: &[f64],
) -> Vec<f64> {
    let mut z = vec![0.0; lookback];
    for (&s, &w) in selected.iter().zip(weights) {
        for (a, v) in z
            .iter_mut()
            .zip(panel.channel_window(s, day, lookback, MA5_CHANNEL))
        {
            *a += w * v;
        }
    }
    z
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSimilarity {
    pub mean_rho: f64,
    pub delta_rho: f64,
    pub t_stat: f64,
    /// One-tailed Welch p-value for `delta_rho > 0`.
    pub p_value: f64,
    pub df: f64,
    pub good_days: usize,
    pub bad_days: usize,
    pub low_power: bool,
    pub daily_rho: Vec<f64>,
}

/// Welch two-sample t statistic and degrees of freedom for `mean(a) > mean(b)`.
pub fn welch(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (stats::sample_var(a) / na, stats::sample_var(b) / nb);
    let diff = stats::mean(a) - stats::mean(b);
    let se = (va + vb).sqrt();
    if se == 0.0 {
        let t = if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        return (t, na + nb - 2.0);
    }
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    (diff / se, df)
}

/// Cosine similarity of the two strategies' `z_d` per day, split into good
/// and bad regimes by the top and bottom `quantile` of `partition` returns.
pub fn conditional_similarity(
    tips_z: &[Vec<f64>],
    base_z: &[Vec<f64>],
    partition: &[f64],
    quantile: f64,
) -> Result<ConditionalSimilarity> {
    let n = tips_z.len();
    if base_z.len() != n || partition.len() != n {
        return Err(Error::config("strategy series cover different days"));
    }
    if !(quantile > 0.0 && quantile <= 0.5) {
        return Err(Error::config(format!(
            "regime quantile must lie in (0, 0.5], got {quantile}"
        )));
    }
    let mut rho = Vec::with_capacity(n);
    let mut ret = Vec::with_capacity(n);
    for d in 0..n {
        if let Some(c) = stats::cosine(&tips_z[d], &base_z[d]) {
            rho.push(c);
            ret.push(partition[d]);
        }
    }
    let m = rho.len();
    let per = ((m as f64) * quantile).floor() as usize;
    if per < 2 {
        return Err(Error::data(format!(
            "only {m} comparable days; too few to form regimes"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| ret[a].total_cmp(&ret[b]));
    let bad: Vec<f64> = order[..per].iter().map(|&i| rho[i]).collect();
    let good: Vec<f64> = order[m - per..].iter().map(|&i| rho[i]).collect();
    let (t, df) = welch(&good, &bad);
    let low_power = per < 10;
    if low_power {
        log::warn!("conditional similarity uses only {per} days per regime; low power");
    }
    Ok(ConditionalSimilarity {
        mean_rho: stats::mean(&rho),
        delta_rho: stats::mean(&good) - stats::mean(&bad),
        t_stat: t,
        p_value: stats::t_upper_tail(t, df),
        df,
        good_days: per,
        bad_days: per,
        low_power,
        daily_rho: rho,
    })
}

/// [`conditional_similarity`] for two backtests over the same `days`,
/// partitioned by the baseline's daily return.
pub fn conditional_similarity_runs(
    tips: &PortfolioRun,
    baseline: &PortfolioRun,
    panel: &MarketPanel,
    days: &[usize],
    lookback: usize,
    quantile: f64,
) -> Result<ConditionalSimilarity> {
    if tips.selected.len() != days.len() || baseline.selected.len() != days.len() {
        return Err(Error::config("runs do not cover the requested days"));
    }
    let z = |run: &PortfolioRun| -> Vec<Vec<f64>> {
        days.iter()
            .enumerate()
            .map(|(i, &d)| strategy_vector(panel, d, lookback, &run.selected[i], &run.weights[i]))
            .collect()
    };
    conditional_similarity(&z(tips), &z(baseline), &baseline.daily, quantile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn ols_examples() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 0.01).collect();
        let a = ols_attribution(&x, &x).unwrap();
        assert!(
            a.alpha.abs() < 1e-15 && (a.beta - 1.0).abs() < 1e-12 && (a.r2 - 1.0).abs() < 1e-12
        );
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 0.001).collect();
        let b = ols_attribution(&y, &x).unwrap();
        assert!(
            (b.alpha - 0.001).abs() < 1e-12
                && (b.beta - 2.0).abs() < 1e-12
                && (b.r2 - 1.0).abs() < 1e-12
        );
        assert!(ols_attribution(&y, &[0.5; 50]).is_err());
    }

    #[test]
    fn ols_null_rejection_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut big = 0;
        for _ in 0..200 {
            let a = ols_attribution(&normals(&mut rng, 250), &normals(&mut rng, 250)).unwrap();
            assert!(a.r2 < 0.05);
            assert!(a.p_value > 0.0 && a.p_value < 1.0);
            big += (a.t_alpha.abs() >= 2.0) as usize;
        }
        assert!(big <= 20, "{big}");
    }

    #[test]
    fn rank_similarity_examples() {
        let days: Vec<Vec<f64>> = (0..5)
            .map(|d| (0..6).map(|s| ((s * 7 + d) % 6) as f64).collect())
            .collect();
        let same = teacher_student_rank_similarity(&days, &vec![days.clone(); 7]).unwrap();
        assert_eq!((same.mean, same.std), (1.0, 0.0));
        let rev: Vec<Vec<f64>> = days
            .iter()
            .map(|d| d.iter().map(|v| -v).collect())
            .collect();
        let r = teacher_student_rank_similarity(&days, &[rev, days.clone()]).unwrap();
        assert_eq!(r.per_teacher, vec![-1.0, 1.0]);
        let mut flat = days.clone();
        flat[0] = vec![1.0; 6];
        assert_eq!(
            teacher_student_rank_similarity(&days, &[flat])
                .unwrap()
                .skipped_days,
            1
        );
    }

    #[test]
    fn rank_similarity_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let student: Vec<Vec<f64>> = (0..30).map(|_| normals(&mut rng, 100)).collect();
        let teachers: Vec<Vec<Vec<f64>>> = (0..7)
            .map(|_| (0..30).map(|_| normals(&mut rng, 100)).collect())
            .collect();
        let r = teacher_student_rank_similarity(&student, &teachers).unwrap();
        assert!(r.per_teacher.iter().all(|v| v.abs() < 0.1));
    }

    fn random_teachers(
        rng: &mut ChaCha8Rng,
        days: usize,
        len: usize,
    ) -> Vec<(PriorKind, Vec<Vec<f64>>)> {
        PriorKind::ALL
            .iter()
            .map(|&k| {
                (
                    k,
                    (0..days)
                        .map(|_| (0..len).map(|_| rng.random::<f64>()).collect())
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn alignment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let teachers = random_teachers(&mut rng, 12, 40);
        let vanilla = teachers
            .iter()
            .find(|(k, _)| *k == PriorKind::Vanilla)
            .unwrap()
            .1
            .clone();
        let t = alignment_from_vectors(&vanilla, &teachers).unwrap();
        assert_eq!(t.fractions["vanilla"], 1.0);
        let mean: Vec<Vec<f64>> = (0..12)
            .map(|d| {
                (0..40)
                    .map(|i| teachers.iter().map(|(_, v)| v[d][i]).sum::<f64>() / 7.0)
                    .collect()
            })
            .collect();
        let t = alignment_from_vectors(&mean, &teachers).unwrap();
        assert_eq!(t.fractions[AVERAGE_TEACHER], 1.0);
        let student: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..40).map(|_| rng.random::<f64>()).collect())
            .collect();
        let t = alignment_from_vectors(&student, &teachers).unwrap();
        assert!((t.fractions.values().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t.fractions.len(), 5);
    }

    #[test]
    fn upsampling_replicates_rows() {
        let m: Vec<f64> = (0..4).map(|v| v as f64).collect();
        assert_eq!(
            upsample_map(&m, 2, 3),
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 2.0, 3.0]
        );
        let m19: Vec<f64> = (0..361).map(|v| v as f64).collect();
        let up = upsample_map(&m19, 19, 20);
        assert_eq!(up.len(), 400);
        assert_eq!((up[0], up[399]), (0.0, 360.0));
    }

    #[test]
    fn conditional_similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z: Vec<Vec<f64>> = (0..60).map(|_| normals(&mut rng, 20)).collect();
        let ret = normals(&mut rng, 60);
        let same = conditional_similarity(&z, &z, &ret, 0.3).unwrap();
        assert!((same.mean_rho - 1.0).abs() < 1e-12 && same.delta_rho.abs() < 1e-12);
        let e = |i: usize| (0..20).map(|j| (j == i) as u8 as f64).collect::<Vec<_>>();
        let a: Vec<Vec<f64>> = (0..60).map(|_| e(0)).collect();
        let b: Vec<Vec<f64>> = (0..60).map(|_| e(1)).collect();
        assert_eq!(
            conditional_similarity(&a, &b, &ret, 0.3).unwrap().mean_rho,
            0.0
        );
        let few = conditional_similarity(&z[..20], &z[..20], &ret[..20], 0.3).unwrap();
        assert!(few.low_power);
    }
}
