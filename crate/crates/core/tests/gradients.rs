mod common;

use candle_core::DType;
use movgan::nn::{tensor_from_f64, to_f64_vec};
use movgan::rng::stream;
use movgan::training::{r1_gradients, r1_penalty};
use rand::Rng;

use common::{gradient_audit, relative_error, MiniModel, Output, Target, AUDIT_PAIRS};

#[test]
fn analytic_gradients_match_central_differences() {
    let mut model = MiniModel::new(11).unwrap();
    let report = gradient_audit(&mut model, &AUDIT_PAIRS, 4, 1e-3, 5).unwrap();
    assert!(report.pass_rate() >= 0.95, "{report:?}");
}

#[test]
fn discriminator_labels_do_not_reach_the_video() {
    let model = MiniModel::new(3).unwrap();
    let g = model.analytic(Target::DiscriminatorLabels, Output::Video).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn motion_latent_does_not_affect_first_frame() {
    let mut model = MiniModel::new(4).unwrap();
    let before = model
        .generator
        .generate_batch(
            &[movgan::generator::LatentPair::new(
                tensor_from_f64(model.content.clone(), &[model.content.len()], DType::F64).unwrap(),
                tensor_from_f64(model.motion.clone(), &[model.motion.len()], DType::F64).unwrap(),
            )
            .unwrap()],
            std::slice::from_ref(&model.layout),
            &model.grid,
        )
        .unwrap();
    for m in model.motion.iter_mut() {
        *m = -*m + 0.5;
    }
    let after = model
        .generator
        .generate_batch(
            &[movgan::generator::LatentPair::new(
                tensor_from_f64(model.content.clone(), &[model.content.len()], DType::F64).unwrap(),
                tensor_from_f64(model.motion.clone(), &[model.motion.len()], DType::F64).unwrap(),
            )
            .unwrap()],
            std::slice::from_ref(&model.layout),
            &model.grid,
        )
        .unwrap();
    let first = |v: &candle_core::Tensor| to_f64_vec(&v.narrow(1, 0, 1).unwrap()).unwrap();
    let last = |v: &candle_core::Tensor| to_f64_vec(&v.narrow(1, 3, 1).unwrap()).unwrap();
    assert_eq!(first(&before), first(&after));
    assert_ne!(last(&before), last(&after));
}

/// The finite-difference Hessian-vector product behind the penalty gradient
/// agrees with differencing the penalty itself.
#[test]
fn penalty_gradient_matches_differenced_penalty() {
    let model = MiniModel::new(21).unwrap();
    let d = &model.discriminator;
    let mut rng = stream(8, &[]);
    let n = 2;
    let frame = |rng: &mut rand_chacha::ChaCha8Rng| {
        let v: Vec<f64> = (0..n * 3 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        tensor_from_f64(v, &[n, 3, 16, 16], DType::F64).unwrap()
    };
    let (x1, x2) = (frame(&mut rng), frame(&mut rng));
    let layouts = vec![model.layout.clone(); n];
    let dt = tensor_from_f64(vec![0.5, 1.0], &[n], DType::F64).unwrap();
    let gamma = 10.0;
    let (penalty, grads) = r1_gradients(d, &x1, &x2, &layouts, &layouts, &dt, gamma).unwrap();
    let direct = r1_penalty(d, &x1, &x2, &layouts, &layouts, &dt, gamma).unwrap();
    assert!(relative_error(penalty, direct) < 1e-9, "{penalty} vs {direct}");

    let mut checked = 0;
    let mut passed = 0;
    let names: Vec<String> = grads.keys().cloned().collect();
    for _ in 0..24 {
        let name = &names[rng.random_range(0..names.len())];
        let var = d.params().get(name).unwrap();
        let mut v = to_f64_vec(var.as_tensor()).unwrap();
        let k = rng.random_range(0..v.len());
        let analytic = to_f64_vec(&grads[name]).unwrap()[k];
        let h = 1e-5;
        let orig = v[k];
        let mut at = |x: f64| {
            v[k] = x;
            var.set(&tensor_from_f64(v.clone(), var.dims(), DType::F64).unwrap()).unwrap();
            r1_penalty(d, &x1, &x2, &layouts, &layouts, &dt, gamma).unwrap()
        };
        let numeric = (at(orig + h) - at(orig - h)) / (2.0 * h);
        at(orig);
        checked += 1;
        if relative_error(analytic, numeric) < 1e-4 {
            passed += 1;
        }
    }
    assert!(passed * 20 >= checked * 19, "{passed}/{checked}");
}
