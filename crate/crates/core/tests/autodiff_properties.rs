//! Randomised invariants of the tape: gradients of composites against central
//! differences, broadcast reduction, linearity and split/concat round trips.

use branchkit::autodiff::{grad_check, Tape};
use branchkit::Tensor;
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    // small deterministic LCG so shapes and values come from the same seed
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn composite_gradients_match_central_differences(
        m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()
    ) {
        let x = tensor(&[m, k], seed);
        let w = tensor(&[k, n], seed ^ 0x9e37);
        let b = tensor(&[n], seed ^ 0x51f1);
        let probe = tensor(&[m, n], seed ^ 0xabcd);
        let report = grad_check(
            |tape, v| {
                let h = v[0].matmul(v[1])?.add(v[2])?;
                let gate = h.sigmoid()?.mul(h.tanh()?)?;
                let mixed = gate.softmax()?.add(h.erf()?.scale(0.5)?)?;
                let mean = mixed.mean(1, true)?;
                mixed.sub(mean)?.mul(tape.constant(probe.clone()))?.sum_all()
            },
            &[x, w, b],
            1e-5,
        ).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn broadcast_gradient_is_sum_of_tiled_gradient(
        rows in 1usize..=8, cols in 1usize..=8, seed in any::<u64>()
    ) {
        let a = tensor(&[rows, cols], seed);
        let b = tensor(&[cols], seed ^ 7);
        let probe = tensor(&[rows, cols], seed ^ 11);

        let tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.leaf(b.clone());
        let loss = av.mul(bv).unwrap().mul(tape.constant(probe.clone())).unwrap().sum_all().unwrap();
        let broadcast_grad = tape.backward(loss).unwrap().wrt(bv);

        // explicit tiling: b copied into every row as an independent leaf
        let tape = Tape::new();
        let tiled = tape.leaf(Tensor::new(&[rows, cols], b.data().repeat(rows)).unwrap());
        let loss = tape.constant(a).mul(tiled).unwrap().mul(tape.constant(probe)).unwrap().sum_all().unwrap();
        let g = tape.backward(loss).unwrap().wrt(tiled);
        let summed: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| g.at(&[r, c])).sum()).collect();
        for (x, y) in broadcast_grad.data().iter().zip(&summed) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        n in 1usize..=8, alpha in -4.0f64..4.0, seed in any::<u64>()
    ) {
        let x = tensor(&[n], seed);
        let grad_for = |scale: f64| {
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            let loss = v.tanh().unwrap().square().unwrap().sum_all().unwrap().scale(scale).unwrap();
            tape.backward(loss).unwrap().wrt(v)
        };
        let base = grad_for(1.0);
        let scaled = grad_for(alpha);
        for (g, s) in base.data().iter().zip(scaled.data()) {
            prop_assert!((alpha * g - s).abs() <= 1e-12 * (1.0 + g.abs() * alpha.abs()));
        }
    }

    #[test]
    fn concat_inverts_split(
        lead in 1usize..=6, half in 1usize..=6, axis_last in any::<bool>(), seed in any::<u64>()
    ) {
        let shape = if axis_last { vec![lead, 2 * half] } else { vec![2 * half, lead] };
        let axis = if axis_last { 1 } else { 0 };
        let x = tensor(&shape, seed);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let (a, b) = v.split2(axis).unwrap();
        prop_assert_eq!(tape.concat(&[a, b], axis).unwrap().value(), x);
    }
}
