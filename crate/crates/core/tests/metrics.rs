use segtransvae::metrics::{binarize, compare, dice_score, hausdorff_percentile, hd95, BinaryMask};
use segtransvae::{Rng, Tensor};

const N: usize = 8;

fn idx(h: usize, w: usize, d: usize) -> usize {
    (h * N + w) * N + d
}

/// Boundary by definition: foreground and (on the border or some face
/// neighbour is background).
fn oracle_boundary(m: &[bool]) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for h in 0..N {
        for w in 0..N {
            for d in 0..N {
                if !m[idx(h, w, d)] {
                    continue;
                }
                let p = [h as isize, w as isize, d as isize];
                let mut edge = false;
                for a in 0..3 {
                    for step in [-1isize, 1] {
                        let mut q = p;
                        q[a] += step;
                        if q[a] < 0 || q[a] >= N as isize || !m[idx(q[0] as usize, q[1] as usize, q[2] as usize)] {
                            edge = true;
                        }
                    }
                }
                if edge {
                    out.push([h as f64, w as f64, d as f64]);
                }
            }
        }
    }
    out
}

fn oracle_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (v.len() as f64 - 1.0);
    let i = rank.floor() as usize;
    if i + 1 >= v.len() {
        return v[i];
    }
    v[i] * (1.0 - (rank - i as f64)) + v[i + 1] * (rank - i as f64)
}

fn oracle_hd(a: &[bool], b: &[bool], s: [f64; 3], q: f64) -> Option<f64> {
    let (pa, pb) = (oracle_boundary(a), oracle_boundary(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let dir = |from: &[[f64; 3]], to: &[[f64; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|r| ((0..3).map(|k| ((p[k] - r[k]) * s[k]).powi(2)).sum::<f64>()).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    Some(oracle_percentile(dir(&pa, &pb), q).max(oracle_percentile(dir(&pb, &pa), q)))
}

fn oracle_dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let s = (a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count()) as f64;
    if s == 0.0 { 1.0 } else { 2.0 * inter / s }
}

fn random_mask(rng: &mut Rng) -> Vec<bool> {
    // mix of sparse noise and solid boxes
    let density = rng.uniform(0.02, 0.6);
    let mut m: Vec<bool> = (0..N * N * N).map(|_| rng.next_f64() < density).collect();
    if rng.below(2) == 0 {
        let lo: Vec<usize> = (0..3).map(|_| rng.below(5) as usize).collect();
        for h in lo[0]..lo[0] + 3 {
            for w in lo[1]..lo[1] + 3 {
                for d in lo[2]..lo[2] + 3 {
                    m[idx(h, w, d)] = true;
                }
            }
        }
    }
    m
}

fn mask(v: Vec<bool>, s: [f64; 3]) -> BinaryMask {
    BinaryMask::new([N, N, N], v, s).unwrap()
}

#[test]
fn fast_paths_match_brute_force_on_random_pairs() {
    let mut rng = Rng::new(100);
    for case in 0..100 {
        let s = if case % 2 == 0 { [1.0; 3] } else { [rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0)] };
        let (a, b) = (random_mask(&mut rng), random_mask(&mut rng));
        let (ma, mb) = (mask(a.clone(), s), mask(b.clone(), s));
        let got = hd95(&ma, &mb).unwrap().unwrap();
        let want = oracle_hd(&a, &b, s, 95.0).unwrap();
        assert!((got - want).abs() <= 1e-9, "case {case}: {got} vs {want}");
        let d = dice_score(&ma, &mb).unwrap();
        assert!((d - oracle_dice(&a, &b)).abs() <= 1e-9);
    }
}

#[test]
fn examples() {
    let s = [1.0; 3];
    let mut a = vec![false; N * N * N];
    let mut b = a.clone();
    a[idx(1, 2, 2)] = true;
    b[idx(4, 2, 2)] = true;
    let (ma, mb) = (mask(a.clone(), s), mask(b, s));
    assert_eq!(hd95(&ma, &mb).unwrap(), Some(3.0));
    assert_eq!(hd95(&ma, &ma).unwrap(), Some(0.0));
    assert_eq!(dice_score(&ma, &ma).unwrap(), 1.0);
    assert_eq!(dice_score(&ma, &mb).unwrap(), 0.0);

    let empty = mask(vec![false; N * N * N], s);
    assert_eq!(hd95(&ma, &empty).unwrap(), None);
    assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);

    let mut x = vec![false; N * N * N];
    let mut y = x.clone();
    for i in 0..4 {
        x[i] = true;
        y[i + 2] = true;
    }
    assert_eq!(dice_score(&mask(x, s), &mask(y, s)).unwrap(), 0.5);
}

#[test]
fn binarize_uses_strict_threshold() {
    let p = Tensor::<f64>::from_f64([3, 1, 1, 2], &[0.6, 0.6, 0.5, 0.5, 0.4, 0.7]).unwrap();
    let m = binarize(&p, [1.0; 3]).unwrap();
    assert_eq!(m[0].data(), &[true, true]);
    assert_eq!(m[1].data(), &[false, false]);
    assert_eq!(m[2].data(), &[false, true]);
}

#[test]
fn metric_properties() {
    let mut rng = Rng::new(7);
    for _ in 0..30 {
        let (a, b) = (random_mask(&mut rng), random_mask(&mut rng));
        let (ma, mb) = (mask(a.clone(), [1.0; 3]), mask(b.clone(), [1.0; 3]));
        assert_eq!(dice_score(&ma, &mb).unwrap(), dice_score(&mb, &ma).unwrap());
        let h = hd95(&ma, &mb).unwrap().unwrap();
        assert_eq!(h, hd95(&mb, &ma).unwrap().unwrap());
        assert!(h <= hausdorff_percentile(&ma, &mb, 100.0).unwrap().unwrap());
        let h2 = hd95(&mask(a, [2.0; 3]), &mask(b, [2.0; 3])).unwrap().unwrap();
        assert!((h2 - 2.0 * h).abs() < 1e-12);
    }
}

#[test]
fn mismatched_masks_are_rejected() {
    let a = BinaryMask::new([2, 2, 2], vec![true; 8], [1.0; 3]).unwrap();
    let b = BinaryMask::new([2, 2, 1], vec![true; 4], [1.0; 3]).unwrap();
    assert!(dice_score(&a, &b).is_err());
    assert!(BinaryMask::new([2, 2, 2], vec![true; 7], [1.0; 3]).is_err());
}

#[test]
fn report_csv_marks_undefined() {
    let s = [1.0; 3];
    let full = mask(vec![true; N * N * N], s);
    let empty = mask(vec![false; N * N * N], s);
    let r = compare(&[full.clone(), empty.clone()], &[full, empty]).unwrap();
    assert_eq!(r.classes[0].dice, 1.0);
    assert_eq!(r.classes[0].hd95, Some(0.0));
    assert_eq!(r.classes[1].hd95, None);
    let csv = r.to_csv();
    assert!(csv.starts_with("class,dice,hd95\n0,1,0\n1,1,undefined\n"));
}
