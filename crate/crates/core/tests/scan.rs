use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use ssmfuse::autodiff::Graph;
use ssmfuse::ssm::{fssm_block, fssm_forward, generate_and_discretize, scan_parallel, scan_sequential, ssm_block, ssm_forward, SsmWeights};
use ssmfuse::{ParamStore, Tensor};

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const LENGTHS: [usize; 6] = [1, 2, 3, 64, 257, 1024];

#[test]
fn parallel_matches_sequential_on_fixed_lengths() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(99);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let l = LENGTHS[i % LENGTHS.len()];
        let c = rng.random_range(1..=8);
        let n = rng.random_range(1..=16);
        let mut store = ParamStore::<f64>::new();
        let p = SsmWeights::init(&mut store, "s", c, n, &mut rng).unwrap().params(&store).unwrap();
        let x = random(&[l, c], &mut rng);
        let d = generate_and_discretize(&x, &p).unwrap();
        let dev = max_abs_diff(&scan_parallel(&x, &d).unwrap(), &scan_sequential(&x, &d).unwrap());
        worst = worst.max(dev);
    }
    assert!(worst <= 1e-10, "max deviation {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn parallel_matches_sequential(l in 1usize..300, c in 1usize..=8, n in 1usize..=16, seed: u64) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let p = SsmWeights::init(&mut store, "s", c, n, &mut rng).unwrap().params(&store).unwrap();
        let x = random(&[l, c], &mut rng);
        let d = generate_and_discretize(&x, &p).unwrap();
        let dev = max_abs_diff(&scan_parallel(&x, &d).unwrap(), &scan_sequential(&x, &d).unwrap());
        prop_assert!(dev <= 1e-10, "deviation {dev}");
    }

    #[test]
    fn parallel_scan_is_deterministic(l in 1usize..300, seed: u64) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let p = SsmWeights::init(&mut store, "s", 3, 4, &mut rng).unwrap().params(&store).unwrap();
        let x = random(&[l, 3], &mut rng);
        let d = generate_and_discretize(&x, &p).unwrap();
        prop_assert_eq!(scan_parallel(&x, &d).unwrap(), scan_parallel(&x, &d).unwrap());
    }

    #[test]
    fn dual_input_on_equal_inputs_is_single_input(l in 1usize..80, c in 1usize..6, n in 1usize..9, seed: u64) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let w = SsmWeights::init(&mut store, "s", c, n, &mut rng).unwrap();
        let x = random(&[l, c], &mut rng);
        let p = w.params(&store).unwrap();
        prop_assert_eq!(fssm_forward(&x, &x, &p).unwrap(), ssm_forward(&x, &p).unwrap());

        let mut g = Graph::new(&store);
        let v = g.input(x.clone()).unwrap();
        let single = ssm_block(&mut g, v, &w).unwrap();
        let dual = fssm_block(&mut g, v, v, &w).unwrap();
        let (ys, yd) = (g.value(single).clone(), g.value(dual).clone());
        prop_assert!(ys.data().iter().zip(yd.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        // the tape path and the plain kernels agree
        prop_assert!(max_abs_diff(&ys, &ssm_forward(&x, &p).unwrap()) < 1e-12);
    }
}
