//! Randomized identities checked against element-by-element oracles.

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ttl_core::data::{encode_idx, idx_dataset, parse_idx_images, parse_idx_labels};
use ttl_core::{
    decode_model, encode_model, kronecker, mode_permutation, Activation, ClassifierSpec, DenseTensor,
    LabeledDataset, Matrix, NetworkModel, TuckerLayer, TuckerWeights,
};

fn random_shape(rng: &mut ChaCha8Rng, order: usize) -> Vec<usize> {
    (0..order).map(|_| rng.random_range(1..=4)).collect()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
    let len = shape.iter().product();
    DenseTensor::new(shape.to_vec(), (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect()).unwrap()
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

/// All multi-indices of `shape`, first index fastest.
fn indices(shape: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; shape.len()]];
    let total: usize = shape.iter().product();
    while out.len() < total {
        let mut next = out.last().unwrap().clone();
        for (k, v) in next.iter_mut().enumerate() {
            *v += 1;
            if *v < shape[k] {
                break;
            }
            *v = 0;
        }
        out.push(next);
    }
    out
}

/// Tucker reconstruction summed entry by entry.
fn tucker_entry(w: &TuckerWeights, index: &[usize]) -> f64 {
    indices(&w.ranks())
        .iter()
        .map(|r| {
            let mut v = w.core().get(r);
            for (n, (&i, &k)) in index.iter().zip(r).enumerate() {
                v *= w.factor(n)[(i, k)];
            }
            v
        })
        .sum()
}

fn random_tucker(rng: &mut ChaCha8Rng, shape: &[usize]) -> TuckerWeights {
    let ranks: Vec<usize> = shape.iter().map(|&i| rng.random_range(1..=i)).collect();
    let core = random_tensor(&ranks, rng);
    let factors = shape.iter().zip(&ranks).map(|(&i, &r)| gaussian(i, r, rng)).collect();
    TuckerWeights::new(core, factors).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn unfold_matches_index_formula_and_folds_back(seed in any::<u64>(), order in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng, order);
        let t = random_tensor(&shape, &mut rng);
        for n in 0..order {
            let m = t.unfold(n).unwrap();
            prop_assert_eq!(m.nrows(), shape[n]);
            for index in indices(&shape) {
                let (mut col, mut stride) = (0, 1);
                for (k, &i) in index.iter().enumerate() {
                    if k != n {
                        col += i * stride;
                        stride *= shape[k];
                    }
                }
                prop_assert_eq!(m[(index[n], col)], t.get(&index));
            }
            prop_assert_eq!(DenseTensor::fold(&m, n, &shape).unwrap(), t.clone());
        }
    }

    #[test]
    fn kronecker_vectorizes_two_sided_products(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q, r, s) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let a = gaussian(p, q, &mut rng);
        let x = gaussian(q, r, &mut rng);
        let b = gaussian(s, r, &mut rng);
        let lhs = &a * &x * b.transpose();
        let rhs = kronecker(&b, &a) * DVector::from_column_slice(x.as_slice());
        for (u, v) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!(close(*u, *v));
        }
    }

    #[test]
    fn mode_permutation_maps_unfoldings_and_inverts(seed in any::<u64>(), order in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng, order);
        let t = random_tensor(&shape, &mut rng);
        let (n, m) = (rng.random_range(0..order), rng.random_range(0..order));
        let p = mode_permutation(&shape, n, m).unwrap();
        let from = t.unfold(m).unwrap();
        let to = t.unfold(n).unwrap();
        prop_assert_eq!(p.apply(from.as_slice()).unwrap(), to.as_slice().to_vec());
        prop_assert_eq!(p.inverse().apply(to.as_slice()).unwrap(), from.as_slice().to_vec());
    }

    #[test]
    fn tucker_reconstruction_matches_entrywise_sum(seed in any::<u64>(), order in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng, order);
        let w = random_tucker(&mut rng, &shape);
        let full = w.reconstruct();
        for index in indices(&shape) {
            prop_assert!(close(full.get(&index), tucker_entry(&w, &index)));
        }
        // Unfolding identity with the remaining factors in reverse order.
        for n in 0..order {
            let mut rest = Matrix::from_element(1, 1, 1.0);
            for k in (0..order).rev().filter(|&k| k != n) {
                rest = kronecker(&rest, w.factor(k));
            }
            let expected = w.factor(n) * w.core().unfold(n).unwrap() * rest.transpose();
            let got = w.unfold(n).unwrap();
            for (u, v) in got.as_slice().iter().zip(expected.as_slice()) {
                prop_assert!(close(*u, *v));
            }
        }
    }

    #[test]
    fn tucker_layer_equals_dense_layer(seed in any::<u64>(), order in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = random_shape(&mut rng, order);
        let output = rng.random_range(1..=4);
        shape.push(output);
        let w = random_tucker(&mut rng, &shape);
        let bias = DVector::from_fn(output, |_, _| StandardNormal.sample(&mut rng));
        let layer = TuckerLayer::new(w.clone(), bias.clone(), Activation::Sigmoid).unwrap();
        let dim: usize = shape[..order].iter().product();
        let samples = rng.random_range(1..=3);
        let x = gaussian(dim, samples, &mut rng);
        let pre = layer.forward(&x).unwrap();
        let out = layer.activation().apply(&pre);
        let input_shape = &shape[..order];
        for j in 0..samples {
            for o in 0..output {
                let mut f = bias[o];
                for (col, index) in indices(input_shape).into_iter().enumerate() {
                    let mut full = index;
                    full.push(o);
                    f += tucker_entry(&w, &full) * x[(col, j)];
                }
                prop_assert!(close(out[(o, j)], 1.0 / (1.0 + (-f).exp())));
            }
        }
    }

    #[test]
    fn model_artifact_roundtrips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_shape = vec![rng.random_range(1..=5), rng.random_range(1..=5)];
        let width = rng.random_range(1..=6);
        let ranks = vec![
            rng.random_range(1..=input_shape[0]),
            rng.random_range(1..=input_shape[1]),
            rng.random_range(1..=width),
        ];
        let mut hidden = vec![width];
        hidden.extend((0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=5)));
        let spec = ClassifierSpec { input_shape, ranks, hidden, classes: rng.random_range(2..=5), activation: Activation::Relu };
        let model = NetworkModel::classifier(&spec, seed).unwrap();
        let bytes = encode_model(&model);
        prop_assert_eq!(decode_model(&bytes).unwrap(), model);
    }

    #[test]
    fn idx_files_roundtrip(seed in any::<u64>(), count in 1usize..=20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = vec![rng.random_range(1..=6), rng.random_range(1..=6)];
        let dim = shape[0] * shape[1];
        let pixels = Matrix::from_fn(dim, count, |_, _| rng.random_range(0u8..=255) as f64 / 255.0);
        let labels: Vec<usize> = (0..count).map(|_| rng.random_range(0..10)).collect();
        let classes = labels.iter().max().unwrap() + 1;
        let ds = LabeledDataset::new(pixels, labels, shape, classes).unwrap();
        let (images, label_bytes) = encode_idx(&ds).unwrap();
        let back = idx_dataset(&parse_idx_images(&images).unwrap(), &parse_idx_labels(&label_bytes).unwrap()).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.sample_shape(), ds.sample_shape());
        prop_assert_eq!(back.samples(), ds.samples());
    }
}
