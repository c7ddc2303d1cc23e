mod common;

use common::{ev, rng};
use copronn::ibd::{
    decompose_class, fit_concept_basis, ibd_sample_scores, nnls, ConceptBasis,
};
use copronn::knn::sample_partitions;
use copronn::logistic::{loss_and_gradient, train, Dataset, TrainerConfig};
use copronn::tcav::{fit_cav, fit_cavs, tcav_class_score, tcav_sample_score};
use copronn::{ConceptSet, EmbeddingVector, LinearHead, RandomPool};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

fn cluster(r: &mut impl Rng, center: &[f64], sigma: f64, n: usize) -> Vec<EmbeddingVector> {
    (0..n)
        .map(|_| {
            let v: Vec<f32> = center
                .iter()
                .map(|&c| (c + sigma * normal(r)) as f32)
                .collect();
            EmbeddingVector::new(v).unwrap()
        })
        .collect()
}

fn axis(dim: usize, j: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[j] = 1.0;
    v
}

#[test]
fn separable_clusters_give_the_axis() {
    let mut r = rng(1);
    let pos = ConceptSet::new("p", None, cluster(&mut r, &[1.0, 0.0], 0.05, 20)).unwrap();
    let neg = cluster(&mut r, &[-1.0, 0.0], 0.05, 20);
    let cav = fit_cav(&pos, &neg, &TrainerConfig::default(), 9).unwrap();
    assert!(angle_deg(&cav.vector, &[1.0, 0.0]) < 5.0);
    let norm: f64 = cav.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-9);
}

#[test]
fn swapping_labels_negates_the_cav() {
    let mut r = rng(2);
    let a = cluster(&mut r, &[0.5, 1.0, -0.2], 0.3, 25);
    let b = cluster(&mut r, &[-0.4, 0.1, 0.3], 0.3, 25);
    let cfg = TrainerConfig::default();
    let ab = fit_cav(&ConceptSet::new("a", None, a.clone()).unwrap(), &b, &cfg, 4).unwrap();
    let ba = fit_cav(&ConceptSet::new("b", None, b).unwrap(), &a, &cfg, 4).unwrap();
    let neg: Vec<f64> = ba.vector.iter().map(|x| -x).collect();
    assert!(angle_deg(&ab.vector, &neg) < 1.0);
}

#[test]
fn xor_square_cannot_beat_three_quarters() {
    // No line puts both diagonals on opposite sides, so at most 3 of the 4
    // corners can be classified correctly.
    let pos = ConceptSet::new("p", None, vec![ev(&[1.0, 1.0]), ev(&[-1.0, -1.0])]).unwrap();
    let neg = [ev(&[1.0, -1.0]), ev(&[-1.0, 1.0])];
    for seed in 0..5 {
        let cav = fit_cav(&pos, &neg, &TrainerConfig::default(), seed).unwrap();
        let norm: f64 = cav.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(cav.accuracy <= 0.75);
    }
}

#[test]
fn identical_points_are_degenerate() {
    let pos = ConceptSet::new("p", None, vec![ev(&[1.0, 2.0])]).unwrap();
    assert!(fit_cav(&pos, &[ev(&[1.0, 2.0])], &TrainerConfig::default(), 0).is_err());
}

/// A concept along `e0` in `dim` dimensions and an isotropic random pool.
fn noisy_problem(seed: u64, dim: usize) -> (Vec<ConceptSet>, RandomPool) {
    let mut r = rng(seed);
    let concept = ConceptSet::new("c", None, cluster(&mut r, &axis(dim, 0), 0.3, 30)).unwrap();
    let pool = RandomPool::new("iso", cluster(&mut r, &vec![0.0; dim], 0.5, 200)).unwrap();
    (vec![concept], pool)
}

#[test]
fn thirty_noisy_cavs_agree_with_an_aligned_head() {
    let (concepts, pool) = noisy_problem(5, 8);
    let partitions = sample_partitions(&pool, 30, 40, 11).unwrap();
    let cavs = fit_cavs(&concepts, &pool, &partitions, &TrainerConfig::default(), 12).unwrap();
    assert_eq!(cavs[0].len(), 30);

    let mut r = rng(6);
    let w: Vec<f64> = axis(8, 0)
        .iter()
        .map(|&x| x + 0.05 * normal(&mut r))
        .collect();
    let head = LinearHead::new(vec![w], vec![0.0]).unwrap();
    let sample = ev(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(tcav_sample_score(&sample, 0, &cavs[0], &head).unwrap() >= 0.9);
}

#[test]
fn cav_fits_are_reproducible() {
    let (concepts, pool) = noisy_problem(8, 6);
    let partitions = sample_partitions(&pool, 4, 30, 1).unwrap();
    let cfg = TrainerConfig::default();
    let a = fit_cavs(&concepts, &pool, &partitions, &cfg, 2).unwrap();
    let b = fit_cavs(&concepts, &pool, &partitions, &cfg, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rescaling_embeddings_keeps_tcav_scores() {
    let (concepts, pool) = noisy_problem(3, 5);
    let partitions = sample_partitions(&pool, 6, 30, 2).unwrap();
    let cfg = TrainerConfig::default();
    let head = LinearHead::new(vec![axis(5, 0), axis(5, 1)], vec![0.0, 0.0]).unwrap();
    let samples = cluster(&mut rng(4), &axis(5, 0), 0.5, 10);
    let scores = |c: f32| {
        let scale = |v: &[EmbeddingVector]| v.iter().map(|x| x.scaled(c).unwrap()).collect::<Vec<_>>();
        let concepts = vec![ConceptSet::new("c", None, scale(&concepts[0].embeddings)).unwrap()];
        let pool = RandomPool::new("iso", scale(&pool.embeddings)).unwrap();
        let cavs = fit_cavs(&concepts, &pool, &partitions, &cfg, 3).unwrap();
        let samples = scale(&samples);
        (0..2)
            .map(|k| tcav_class_score(&samples, k, &cavs[0], &head).unwrap().to_bits())
            .collect::<Vec<_>>()
    };
    let base = scores(1.0);
    assert_eq!(scores(0.1), base);
    assert_eq!(scores(10.0), base);
}

#[test]
fn axis_concepts_give_an_axis_basis() {
    let mut r = rng(7);
    let concepts: Vec<ConceptSet> = (0..2)
        .map(|j| ConceptSet::new(format!("c{j}"), None, cluster(&mut r, &axis(4, j), 0.1, 30)).unwrap())
        .collect();
    let negatives = cluster(&mut r, &[0.0, 0.0, 0.0, 0.0], 0.1, 60);
    let basis = fit_concept_basis(&concepts, &negatives, &TrainerConfig::default(), 1).unwrap();
    assert_eq!(basis.len(), 2);
    for j in 0..2 {
        assert!(angle_deg(&basis.vectors[j], &axis(4, j)) < 5.0, "concept {j}");
    }
}

#[test]
fn duplicate_concepts_give_duplicate_directions() {
    let mut r = rng(8);
    let set = cluster(&mut r, &[1.0, 0.5, 0.0], 0.2, 30);
    let concepts = vec![
        ConceptSet::new("a", None, set.clone()).unwrap(),
        ConceptSet::new("b", None, set).unwrap(),
    ];
    let negatives = cluster(&mut r, &[0.0, 0.0, 0.0], 0.5, 60);
    let basis = fit_concept_basis(&concepts, &negatives, &TrainerConfig::default(), 2).unwrap();
    assert!(angle_deg(&basis.vectors[0], &basis.vectors[1]) < 1.0);

    let d = decompose_class(0, &basis.vectors[0].clone(), &basis, 2).unwrap();
    assert_eq!(d.selected.len(), 1);
    assert!(d.residual_norm() < 0.2);
}

#[test]
fn single_concept_basis() {
    let mut r = rng(9);
    let concepts = vec![ConceptSet::new("a", None, cluster(&mut r, &[1.0, 1.0], 0.1, 10)).unwrap()];
    let negatives = cluster(&mut r, &[-1.0, 0.0], 0.1, 10);
    let basis = fit_concept_basis(&concepts, &negatives, &TrainerConfig::default(), 3).unwrap();
    assert_eq!(basis.len(), 1);
}

/// Exhaustive NNLS: least squares on every column subset, keeping the best
/// solution whose coefficients are all nonnegative.
fn nnls_by_enumeration(columns: &[Vec<f64>], target: &[f64]) -> f64 {
    let n = columns.len();
    let mut best = target.iter().map(|x| x * x).sum::<f64>();
    for mask in 1u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let p = set.len();
        // Normal equations solved by Gaussian elimination with partial pivoting.
        let mut a = vec![vec![0.0; p + 1]; p];
        for (r, &i) in set.iter().enumerate() {
            for (c, &j) in set.iter().enumerate() {
                a[r][c] = columns[i].iter().zip(&columns[j]).map(|(x, y)| x * y).sum();
            }
            a[r][p] = columns[i].iter().zip(target).map(|(x, y)| x * y).sum();
        }
        let mut singular = false;
        for c in 0..p {
            let piv = (c..p).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
            if a[piv][c].abs() < 1e-10 {
                singular = true;
                break;
            }
            a.swap(c, piv);
            let pivot = a[c].clone();
            for (r, row) in a.iter_mut().enumerate() {
                if r != c {
                    let f = row[c] / pivot[c];
                    row.iter_mut().zip(&pivot).skip(c).for_each(|(x, y)| *x -= f * y);
                }
            }
        }
        if singular {
            continue;
        }
        let x: Vec<f64> = (0..p).map(|r| a[r][p] / a[r][r]).collect();
        if x.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut res = target.to_vec();
        for (&i, &s) in set.iter().zip(&x) {
            res.iter_mut().zip(&columns[i]).for_each(|(r, q)| *r -= s * q);
        }
        best = best.min(res.iter().map(|v| v * v).sum());
    }
    best
}

fn random_vec(r: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(r)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nnls_matches_enumeration(seed in any::<u64>(), dim in 2usize..7, n in 1usize..5) {
        let mut r = rng(seed);
        let columns: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, dim)).collect();
        let target = random_vec(&mut r, dim);
        let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
        let x = nnls(&refs, &target);
        prop_assert!(x.iter().all(|&v| v >= 0.0));
        let mut res = target.clone();
        for (c, s) in columns.iter().zip(&x) {
            res.iter_mut().zip(c).for_each(|(r, q)| *r -= s * q);
        }
        let got: f64 = res.iter().map(|v| v * v).sum();
        let want = nnls_by_enumeration(&columns, &target);
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want), "nnls {got} vs oracle {want}");
    }

    #[test]
    fn decomposition_identities(seed in any::<u64>(), dim in 2usize..10, m in 1usize..6) {
        let mut r = rng(seed);
        let basis = ConceptBasis::new((0..m).map(|_| random_vec(&mut r, dim)).collect()).unwrap();
        let w = random_vec(&mut r, dim);
        let d = decompose_class(0, &w, &basis, m).unwrap();
        for (x, y) in d.reconstruct(&basis).iter().zip(&w) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        let a: Vec<f32> = random_vec(&mut r, dim).iter().map(|&x| x as f32).collect();
        let a = EmbeddingVector::new(a).unwrap();
        if a.dot(&w).abs() > 1e-6 {
            let att = ibd_sample_scores(&a, &d, &basis).unwrap();
            let total: f64 = att.scores.iter().sum::<f64>() + att.residual;
            prop_assert!((total - 1.0).abs() <= 1e-9, "sum {total}");
        }
    }

    #[test]
    fn more_components_never_grow_the_residual(seed in any::<u64>(), dim in 2usize..8, m in 1usize..6) {
        let mut r = rng(seed);
        let basis = ConceptBasis::new((0..m).map(|_| random_vec(&mut r, dim)).collect()).unwrap();
        let w = random_vec(&mut r, dim);
        let mut last = f64::INFINITY;
        for c in 0..=m {
            let res = decompose_class(0, &w, &basis, c).unwrap().residual_norm();
            prop_assert!(res <= last + 1e-12);
            last = res;
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dim = r.random_range(1..8);
        let n = r.random_range(2..30);
        let features: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let labels: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
        let data = Dataset::new(dim, features, labels).unwrap();
        let params: Vec<f64> = (0..=dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let (_, grad) = loss_and_gradient(&data, &params);
        let h = 1e-5;
        for i in 0..=dim {
            let mut up = params.clone();
            let mut down = params.clone();
            up[i] += h;
            down[i] -= h;
            let numeric = (loss_and_gradient(&data, &up).0 - loss_and_gradient(&data, &down).0) / (2.0 * h);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
            prop_assert!(rel <= 1e-4, "coordinate {i}: {numeric} vs {}", grad[i]);
        }
    }
}

#[test]
fn trainer_reports_convergence_on_easy_data() {
    let mut r = rng(10);
    let pos = cluster(&mut r, &[2.0, 0.0], 1.0, 40);
    let neg = cluster(&mut r, &[-2.0, 0.0], 1.0, 40);
    let fit = train(&pos, &neg, &TrainerConfig::default(), 0).unwrap();
    assert!(fit.accuracy > 0.9);
    assert!(fit.weights[0] > 0.0);
}
