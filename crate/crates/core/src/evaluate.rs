//! Diarization scoring: optimal reference-to-hypothesis speaker mapping,
//! time-weighted Miss/FA/SE/DER with an optional no-score collar and
//! overlap exclusion, and RTTM read/write.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::corpus::{LabeledInterval, ReferenceLabels, SegmentGrid};
use crate::error::{Error, Result};

/// Time-weighted error breakdown; all fractions of total reference
/// speaker time inside the scored regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerBreakdown {
    pub miss: f64,
    pub fa: f64,
    pub se: f64,
    pub der: f64,
    /// Seconds of scored reference speaker time (the denominator).
    pub scored_time: f64,
}

fn speaker_names(labels: &ReferenceLabels) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for iv in labels {
        if !names.contains(&iv.speaker) {
            names.push(iv.speaker.clone());
        }
    }
    names
}

/// Total co-occurring time per (ref speaker, hyp speaker) pair.
fn overlap_matrix(
    r: &ReferenceLabels,
    h: &ReferenceLabels,
    ref_names: &[String],
    hyp_names: &[String],
) -> Array2<f64> {
    let mut out = Array2::zeros((ref_names.len(), hyp_names.len()));
    for ri in r {
        let i = ref_names.iter().position(|n| n == &ri.speaker).unwrap();
        for hi in h {
            let j = hyp_names.iter().position(|n| n == &hi.speaker).unwrap();
            let lo = ri.start.max(hi.start);
            let hi_t = ri.end.min(hi.end);
            if hi_t > lo {
                out[(i, j)] += hi_t - lo;
            }
        }
    }
    out
}

/// Maximum-weight one-to-one assignment on a non-negative matrix via
/// subset dynamic programming over the smaller side. Returns, per row, the
/// assigned column (or none).
fn optimal_assignment(weights: &Array2<f64>) -> Result<Vec<Option<usize>>> {
    let (rows, cols) = weights.dim();
    if rows == 0 || cols == 0 {
        return Ok(vec![None; rows]);
    }
    // make the masked side the smaller one
    if rows > cols {
        let t = weights.t().to_owned();
        let col_assign = optimal_assignment(&t)?;
        let mut out = vec![None; rows];
        for (c, ra) in col_assign.iter().enumerate() {
            if let Some(r) = ra {
                out[*r] = Some(c);
            }
        }
        return Ok(out);
    }
    if rows > 20 {
        return Err(Error::Parameter(format!(
            "assignment over {rows} speakers exceeds the supported size"
        )));
    }
    let full = 1usize << rows;
    // dp[j][mask]: best score over the first j columns with rows `mask` used
    let mut dp = vec![vec![f64::NEG_INFINITY; full]; cols + 1];
    dp[0][0] = 0.0;
    for j in 0..cols {
        let (head, tail) = dp.split_at_mut(j + 1);
        let cur = &head[j];
        let next = &mut tail[0];
        next.copy_from_slice(cur); // column j left unassigned
        for mask in 0..full {
            if cur[mask] == f64::NEG_INFINITY {
                continue;
            }
            for r in 0..rows {
                if mask & (1 << r) != 0 {
                    continue;
                }
                let m2 = mask | (1 << r);
                let v = cur[mask] + weights[(r, j)];
                if v > next[m2] {
                    next[m2] = v;
                }
            }
        }
    }
    let mut mask = (0..full).max_by(|&a, &b| dp[cols][a].total_cmp(&dp[cols][b])).unwrap();
    // walk columns backwards to recover which row took each column
    let mut out = vec![None; rows];
    for j in (0..cols).rev() {
        if (dp[j][mask] - dp[j + 1][mask]).abs() < 1e-12 {
            continue; // column j unassigned on the optimal path
        }
        let mut found = false;
        for r in 0..rows {
            if mask & (1 << r) == 0 {
                continue;
            }
            let prev = mask & !(1 << r);
            if (dp[j][prev] + weights[(r, j)] - dp[j + 1][mask]).abs() < 1e-9 {
                out[r] = Some(j);
                mask = prev;
                found = true;
                break;
            }
        }
        debug_assert!(found, "backtracking failed at column {j}");
    }
    Ok(out)
}

/// Optimal one-to-one mapping from reference speakers to hypothesis
/// speakers, maximizing co-occurring time. Unmatched speakers are absent
/// from the result.
pub fn map_speakers(r: &ReferenceLabels, h: &ReferenceLabels) -> Result<Vec<(String, String)>> {
    if r.is_empty() || h.is_empty() {
        return Err(Error::Data("cannot map speakers on empty label sets".into()));
    }
    let ref_names = speaker_names(r);
    let hyp_names = speaker_names(h);
    let w = overlap_matrix(r, h, &ref_names, &hyp_names);
    let assign = optimal_assignment(&w)?;
    let mut out = Vec::new();
    for (i, a) in assign.iter().enumerate() {
        if let Some(j) = a {
            if w[(i, *j)] > 0.0 {
                out.push((ref_names[i].clone(), hyp_names[*j].clone()));
            }
        }
    }
    Ok(out)
}

/// Time-weighted diarization error: miss, false alarm, and speaker error
/// over scored regions. A collar around every reference boundary is
/// excluded; regions where the reference has 2+ simultaneous speakers are
/// excluded unless `score_overlap`.
pub fn compute_der(
    r: &ReferenceLabels,
    h: &ReferenceLabels,
    collar: f64,
    score_overlap: bool,
) -> Result<DerBreakdown> {
    if !(collar >= 0.0) {
        return Err(Error::Parameter("collar must be >= 0".into()));
    }
    let ref_names = speaker_names(r);
    let hyp_names = speaker_names(h);
    let mapping = if r.is_empty() || h.is_empty() {
        Vec::new()
    } else {
        map_speakers(r, h)?
    };
    let map: BTreeMap<&str, &str> =
        mapping.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let _ = hyp_names;

    // elementary time slices from every boundary (collar edges included)
    let mut cuts: Vec<f64> = Vec::new();
    for iv in r.iter().chain(h.iter()) {
        cuts.push(iv.start);
        cuts.push(iv.end);
    }
    let mut no_score: Vec<(f64, f64)> = Vec::new();
    if collar > 0.0 {
        for iv in r {
            for b in [iv.start, iv.end] {
                let lo = (b - collar).max(0.0);
                let hi = b + collar;
                no_score.push((lo, hi));
                cuts.push(lo);
                cuts.push(hi);
            }
        }
    }
    cuts.retain(|v| v.is_finite() && *v >= 0.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let mut miss_t = 0.0;
    let mut fa_t = 0.0;
    let mut se_t = 0.0;
    let mut denom = 0.0;
    let mut scored = 0.0;
    for pair in cuts.windows(2) {
        let (t0, t1) = (pair[0], pair[1]);
        let dur = t1 - t0;
        if dur <= 0.0 {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        if no_score.iter().any(|&(lo, hi)| mid > lo && mid < hi) {
            continue;
        }
        let ref_active: Vec<&str> = r
            .iter()
            .filter(|iv| iv.start <= mid && mid < iv.end)
            .map(|iv| iv.speaker.as_str())
            .collect();
        if !score_overlap && ref_active.len() > 1 {
            continue;
        }
        let hyp_active: Vec<&str> = h
            .iter()
            .filter(|iv| iv.start <= mid && mid < iv.end)
            .map(|iv| iv.speaker.as_str())
            .collect();
        let n_ref = ref_active.len() as f64;
        let n_hyp = hyp_active.len() as f64;
        let n_correct = ref_active
            .iter()
            .filter(|rs| map.get(**rs).is_some_and(|hs| hyp_active.contains(hs)))
            .count() as f64;
        miss_t += (n_ref - n_hyp).max(0.0) * dur;
        fa_t += (n_hyp - n_ref).max(0.0) * dur;
        se_t += (n_ref.min(n_hyp) - n_correct) * dur;
        denom += n_ref * dur;
        if n_ref > 0.0 || n_hyp > 0.0 {
            scored += dur;
        }
    }
    let _ = ref_names;
    if denom <= 0.0 {
        return Err(Error::Data("no scored reference speech; rates undefined".into()));
    }
    let (miss, fa, se) = (miss_t / denom, fa_t / denom, se_t / denom);
    Ok(DerBreakdown { miss, fa, se, der: miss + fa + se, scored_time: scored })
}

/// Parse SPEAKER records from an RTTM file.
pub fn read_rttm(path: &Path) -> Result<ReferenceLabels> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with(';') || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields[0] != "SPEAKER" {
            continue;
        }
        if fields.len() < 8 {
            return Err(Error::Parse {
                line,
                msg: format!("SPEAKER record has {} fields, expected at least 8", fields.len()),
            });
        }
        let start: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("bad onset '{}'", fields[3]) })?;
        let dur: f64 = fields[4]
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("bad duration '{}'", fields[4]) })?;
        if !(start >= 0.0) || !(dur >= 0.0) {
            return Err(Error::Parse { line, msg: "negative onset or duration".into() });
        }
        out.push(LabeledInterval {
            start,
            end: start + dur,
            speaker: fields[7].to_string(),
        });
    }
    Ok(out)
}

/// Write SPEAKER records, merging adjacent intervals of the same speaker.
/// Times are rounded to the millisecond.
pub fn write_rttm(labels: &ReferenceLabels, file_id: &str, path: &Path) -> Result<()> {
    let merged = merge_adjacent(labels);
    let mut f = fs::File::create(path)?;
    for iv in &merged {
        writeln!(
            f,
            "SPEAKER {file_id} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            iv.start,
            iv.end - iv.start,
            iv.speaker
        )?;
    }
    Ok(())
}

/// Merge intervals that touch (within 1 ms) and share a speaker.
pub fn merge_adjacent(labels: &ReferenceLabels) -> ReferenceLabels {
    let mut sorted: ReferenceLabels = labels.to_vec();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.speaker.cmp(&b.speaker)));
    let mut out: ReferenceLabels = Vec::new();
    for iv in sorted {
        if let Some(last) = out.last_mut() {
            if last.speaker == iv.speaker && iv.start <= last.end + 1e-3 {
                last.end = last.end.max(iv.end);
                continue;
            }
        }
        out.push(iv);
    }
    out
}

/// Segment-level hypothesis labels mapped back to original-time intervals.
/// `frame_map[i]` is the original frame index of speech frame i.
pub fn hypothesis_intervals(
    labels: &[usize],
    grid: &SegmentGrid,
    frame_map: &[usize],
    frame_shift: f64,
) -> Result<ReferenceLabels> {
    if labels.len() != grid.segments() {
        return Err(Error::Parameter("one label per segment required".into()));
    }
    if frame_map.len() != grid.speech_frames() {
        return Err(Error::Parameter("frame map does not match grid".into()));
    }
    let mut out: ReferenceLabels = Vec::new();
    for (i, &orig) in frame_map.iter().enumerate() {
        let spk = format!("spk{:02}", labels[grid.segment_of(i)]);
        let start = orig as f64 * frame_shift;
        let end = start + frame_shift;
        if let Some(last) = out.last_mut() {
            if last.speaker == spk && (start - last.end).abs() < 1e-9 {
                last.end = end;
                continue;
            }
        }
        out.push(LabeledInterval { start, end, speaker: spk });
    }
    Ok(merge_adjacent(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use tempfile::tempdir;

    fn iv(start: f64, end: f64, s: &str) -> LabeledInterval {
        LabeledInterval { start, end, speaker: s.to_string() }
    }

    #[test]
    fn mapping_recovers_renaming() {
        let r = vec![iv(0.0, 5.0, "alice"), iv(5.0, 10.0, "bob")];
        let h = vec![iv(0.0, 5.0, "x"), iv(5.0, 10.0, "y")];
        let mut m = map_speakers(&r, &h).unwrap();
        m.sort();
        assert_eq!(m, vec![("alice".into(), "x".into()), ("bob".into(), "y".into())]);
    }

    #[test]
    fn mapping_picks_larger_overlap() {
        let r = vec![iv(0.0, 10.0, "a")];
        let h = vec![iv(0.0, 3.0, "h1"), iv(3.0, 10.0, "h2")];
        let m = map_speakers(&r, &h).unwrap();
        assert_eq!(m, vec![("a".into(), "h2".into())]);
    }

    fn brute_force_assignment(w: &Array2<f64>) -> f64 {
        // exhaustive search over injective row->column maps
        fn rec(w: &Array2<f64>, row: usize, used: u32) -> f64 {
            if row == w.nrows() {
                return 0.0;
            }
            let mut best = rec(w, row + 1, used); // leave row unmatched
            for c in 0..w.ncols() {
                if used & (1 << c) == 0 {
                    best = best.max(w[(row, c)] + rec(w, row + 1, used | (1 << c)));
                }
            }
            best
        }
        rec(w, 0, 0)
    }

    #[test]
    fn assignment_matches_bruteforce() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let rows = rng.gen_range(1..6);
            let cols = rng.gen_range(1..6);
            let w = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(0.0..10.0f64));
            let assign = optimal_assignment(&w).unwrap();
            let total: f64 = assign
                .iter()
                .enumerate()
                .filter_map(|(r, c)| c.map(|c| w[(r, c)]))
                .sum();
            // injectivity
            let cols_used: Vec<usize> = assign.iter().filter_map(|c| *c).collect();
            let mut dedup = cols_used.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), cols_used.len());
            let best = brute_force_assignment(&w);
            assert_abs_diff_eq!(total, best, epsilon = 1e-9);
        }
    }

    #[test]
    fn der_zero_for_exact_and_renamed_hypothesis() {
        let r = vec![iv(0.0, 4.0, "a"), iv(4.0, 9.0, "b")];
        let d = compute_der(&r, &r, 0.0, true).unwrap();
        assert_abs_diff_eq!(d.der, 0.0, epsilon = 1e-12);
        let h = vec![iv(0.0, 4.0, "z1"), iv(4.0, 9.0, "z0")];
        let d2 = compute_der(&r, &h, 0.0, true).unwrap();
        assert_abs_diff_eq!(d2.der, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn der_hand_case_ten_percent_se() {
        // 10 s single-speaker reference; hypothesis correct except 1 s
        // labeled as a second speaker
        let r = vec![iv(0.0, 10.0, "a")];
        let h = vec![iv(0.0, 9.0, "h0"), iv(9.0, 10.0, "h1")];
        let d = compute_der(&r, &h, 0.0, true).unwrap();
        assert_abs_diff_eq!(d.se, 0.10, epsilon = 1e-12);
        assert_abs_diff_eq!(d.miss, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.fa, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.der, 0.10, epsilon = 1e-12);
        assert_abs_diff_eq!(d.scored_time, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn der_components_sum() {
        let r = vec![iv(0.0, 6.0, "a"), iv(6.0, 10.0, "b")];
        let h = vec![iv(1.0, 7.5, "x")];
        let d = compute_der(&r, &h, 0.0, true).unwrap();
        assert_abs_diff_eq!(d.der, d.miss + d.fa + d.se, epsilon = 1e-12);
        assert!(d.miss > 0.0 && d.se > 0.0);
    }

    #[test]
    fn collar_forgives_boundary_jitter() {
        let r = vec![iv(0.0, 5.0, "a"), iv(5.0, 10.0, "b")];
        // boundary placed at 5.2 instead of 5.0
        let h = vec![iv(0.0, 5.2, "x"), iv(5.2, 10.0, "y")];
        let strict = compute_der(&r, &h, 0.0, true).unwrap();
        assert!(strict.se > 0.0);
        let lenient = compute_der(&r, &h, 0.25, true).unwrap();
        assert_abs_diff_eq!(lenient.der, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn overlap_exclusion_drops_double_talk() {
        // b overlaps a during [4, 6]
        let r = vec![iv(0.0, 6.0, "a"), iv(4.0, 10.0, "b")];
        let h = vec![iv(0.0, 5.0, "x"), iv(5.0, 10.0, "y")];
        let excl = compute_der(&r, &h, 0.0, false).unwrap();
        // hypothesis is perfect outside the overlap region
        assert_abs_diff_eq!(excl.der, 0.0, epsilon = 1e-12);
        let incl = compute_der(&r, &h, 0.0, true).unwrap();
        assert!(incl.miss > 0.0, "overlap must cost a miss when scored");
    }

    #[test]
    fn miss_and_fa_ignore_hyp_speaker_names() {
        let r = vec![iv(0.0, 5.0, "a"), iv(6.0, 9.0, "b")];
        let h1 = vec![iv(0.0, 7.0, "p"), iv(7.0, 8.0, "q")];
        let h2 = vec![iv(0.0, 7.0, "q"), iv(7.0, 8.0, "zz")];
        let d1 = compute_der(&r, &h1, 0.0, true).unwrap();
        let d2 = compute_der(&r, &h2, 0.0, true).unwrap();
        assert_abs_diff_eq!(d1.miss, d2.miss, epsilon = 1e-12);
        assert_abs_diff_eq!(d1.fa, d2.fa, epsilon = 1e-12);
    }

    #[test]
    fn der_invariant_under_ref_renaming() {
        let r1 = vec![iv(0.0, 5.0, "a"), iv(5.0, 9.0, "b")];
        let r2 = vec![iv(0.0, 5.0, "bob"), iv(5.0, 9.0, "alice")];
        let h = vec![iv(0.0, 4.0, "x"), iv(4.0, 9.0, "y")];
        let d1 = compute_der(&r1, &h, 0.0, true).unwrap();
        let d2 = compute_der(&r2, &h, 0.0, true).unwrap();
        assert_abs_diff_eq!(d1.der, d2.der, epsilon = 1e-12);
    }

    #[test]
    fn empty_scored_time_is_an_error() {
        let r = vec![iv(0.0, 0.4, "a")];
        let h = vec![iv(0.0, 0.4, "x")];
        // collar swallows the entire reference
        assert!(compute_der(&r, &h, 1.0, true).is_err());
    }

    #[test]
    fn rttm_round_trip_and_merge() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.rttm");
        let labels = vec![iv(0.0, 1.5, "a"), iv(1.5, 3.0, "a"), iv(3.0, 4.25, "b")];
        write_rttm(&labels, "conv0", &path).unwrap();
        let back = read_rttm(&path).unwrap();
        // adjacent same-speaker intervals came back merged
        assert_eq!(back.len(), 2);
        assert_abs_diff_eq!(back[0].start, 0.0, epsilon = 1e-3);
        assert_abs_diff_eq!(back[0].end, 3.0, epsilon = 1e-3);
        assert_eq!(back[0].speaker, "a");
        assert_abs_diff_eq!(back[1].end, 4.25, epsilon = 1e-3);
    }

    #[test]
    fn rttm_empty_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.rttm");
        write_rttm(&Vec::new(), "conv0", &path).unwrap();
        assert!(read_rttm(&path).unwrap().is_empty());
    }

    #[test]
    fn rttm_malformed_line_reports_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.rttm");
        std::fs::write(&path, "SPEAKER f 1 0.0 1.0 <NA> <NA> a <NA> <NA>\nSPEAKER broken\n")
            .unwrap();
        match read_rttm(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn hypothesis_intervals_merge_segments() {
        use crate::corpus::make_grid;
        let grid = make_grid(10, 5).unwrap(); // 2 segments of 5 frames
        let frame_map: Vec<usize> = (0..10).collect();
        let out = hypothesis_intervals(&[0, 0], &grid, &frame_map, 0.01).unwrap();
        assert_eq!(out.len(), 1);
        assert_abs_diff_eq!(out[0].end, 0.1, epsilon = 1e-12);
        let split = hypothesis_intervals(&[0, 1], &grid, &frame_map, 0.01).unwrap();
        assert_eq!(split.len(), 2);
        assert_abs_diff_eq!(split[0].end, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn hypothesis_intervals_respect_gaps() {
        use crate::corpus::make_grid;
        let grid = make_grid(6, 3).unwrap();
        // speech frames 0-2 at original 0-2, frames 3-5 at original 10-12
        let frame_map = vec![0, 1, 2, 10, 11, 12];
        let out = hypothesis_intervals(&[0, 0], &grid, &frame_map, 0.01).unwrap();
        assert_eq!(out.len(), 2, "gap in original time must split the interval");
    }
}
