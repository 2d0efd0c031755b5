//! Finite-difference drivers. Each returns the worst relative error.

use isrf_core::align::{loss_distill, loss_seq, AlignBatch, DistillDenominator};
use isrf_core::embed::{adapter_forward, adapter_gradient, AdapterActivation, AdapterParams};
use isrf_core::genrec::model::{teacher_forcing_input, Backbone};
use isrf_core::genrec::{inject_backward, inject_inputs, sequence_nll, BackboneConfig, InjectionGrads, Task};
use isrf_core::tensor::Mat;
use isrf_core::train::{init_state, prepare, total_loss, ModelState, Prepared, Terms, TrainConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().copied().collect()
}

pub fn perturbed(m: &Mat, i: usize, delta: f64) -> Mat {
    let mut m = m.to_owned();
    m.as_slice_mut().unwrap()[i] += delta;
    m
}

pub fn random_adapter(r: &mut ChaCha8Rng, d_m: usize, d: usize, act: AdapterActivation) -> AdapterParams {
    let mut p = AdapterParams::init(d_m, d, r.gen()).unwrap();
    p.b1.mapv_inplace(|_| r.gen_range(-0.5..0.5));
    p.b2.mapv_inplace(|_| r.gen_range(-0.5..0.5));
    p.activation = act;
    p
}

pub fn adapter_fd(act: AdapterActivation, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (d_m, d) = (4, 6);
    let params = random_adapter(&mut r, d_m, d, act);
    let s = random_mat(&mut r, 7, d_m);
    let w = random_mat(&mut r, 7, d);
    let loss = |p: &AdapterParams| (adapter_forward(&s, p).unwrap() * &w).sum();
    let g = adapter_gradient(&s, &params, &w).unwrap();

    let analytic: Vec<f64> =
        g.w1.iter()
            .chain(g.b1.iter())
            .chain(g.w2.iter())
            .chain(g.b2.iter())
            .copied()
            .collect();
    let (n1, nb1, n2) = (params.w1.len(), params.b1.len(), params.w2.len());
    fd_worst(&analytic, |i, delta| {
        let mut p = params.clone();
        let slot = if i < n1 {
            &mut p.w1.as_slice_mut().unwrap()[i]
        } else if i < n1 + nb1 {
            &mut p.b1.as_slice_mut().unwrap()[i - n1]
        } else if i < n1 + nb1 + n2 {
            &mut p.w2.as_slice_mut().unwrap()[i - n1 - nb1]
        } else {
            &mut p.b2.as_slice_mut().unwrap()[i - n1 - nb1 - n2]
        };
        *slot += delta;
        loss(&p)
    })
    .0
}

/// Student-side error of the distillation loss; also reports whether every
/// teacher gradient entry is bitwise zero.
pub fn distill_fd(denom: DistillDenominator, seed: u64) -> (f64, bool) {
    let mut r = rng(seed);
    let t = random_mat(&mut r, 8, 6);
    let s = random_mat(&mut r, 8, 6);
    let tau = 0.3;
    let out = loss_distill(
        &AlignBatch {
            teacher: &t,
            student: &s,
            tau,
        },
        denom,
    )
    .unwrap();
    let zero = out.grad_teacher.iter().all(|x| x.to_bits() == 0);
    let (worst, _) = fd_worst(&flat(&out.grad_student), |i, d| {
        let s2 = perturbed(&s, i, d);
        loss_distill(
            &AlignBatch {
                teacher: &t,
                student: &s2,
                tau,
            },
            denom,
        )
        .unwrap()
        .loss
    });
    (worst, zero)
}

/// Errors on the student and teacher sides of the sequential loss.
pub fn seq_fd(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let t = random_mat(&mut r, 8, 6);
    let s = random_mat(&mut r, 8, 6);
    let tau = 0.5;
    let out = loss_seq(&AlignBatch {
        teacher: &t,
        student: &s,
        tau,
    })
    .unwrap();
    let (ws, _) = fd_worst(&flat(&out.grad_student), |i, d| {
        loss_seq(&AlignBatch {
            teacher: &t,
            student: &perturbed(&s, i, d),
            tau,
        })
        .unwrap()
        .loss
    });
    let (wt, _) = fd_worst(&flat(&out.grad_teacher), |i, d| {
        loss_seq(&AlignBatch {
            teacher: &perturbed(&t, i, d),
            student: &s,
            tau,
        })
        .unwrap()
        .loss
    });
    (ws, wt)
}

pub fn small_backbone(seed: u64) -> Backbone {
    let cfg = BackboneConfig {
        d: 4,
        vocab_size: 7,
        max_enc_len: 6,
        max_dec_len: 4,
    };
    let mut b = Backbone::init(cfg, seed);
    // non-zero output bias so every tensor is exercised
    b.out_b.mapv_inplace(|_| 0.1);
    b
}

pub fn backbone_loss(b: &Backbone, xt: &Mat, target: &[usize]) -> f64 {
    let enc = b.encode(xt).unwrap();
    let dec = b.decode(&enc, &teacher_forcing_input(target)).unwrap();
    sequence_nll(&dec.logits, target).unwrap().0
}

/// Worst error over every backbone tensor and the encoder input.
pub fn backbone_fd(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = small_backbone(seed);
    let xt = random_mat(&mut r, 5, 4);
    let target = vec![r.gen_range(0..7), r.gen_range(0..7), 1];
    let dec_in = teacher_forcing_input(&target);
    let enc = b.encode(&xt).unwrap();
    let dec = b.decode(&enc, &dec_in).unwrap();
    let (_, dlogits) = sequence_nll(&dec.logits, &target).unwrap();
    let mut g = Backbone::zeros(b.config);
    let d_x = b.backward(&enc, &dec, &dec_in, &dlogits, &mut g);

    let mut worst = fd_worst(&flat(&d_x), |i, d| backbone_loss(&b, &perturbed(&xt, i, d), &target)).0;
    for k in 0..b.tensors().len() {
        let analytic = flat(g.tensors()[k].1);
        let (w, _) = fd_worst(&analytic, |i, d| {
            let mut b2 = b.clone();
            b2.tensors_mut()[k].1.as_slice_mut().unwrap()[i] += d;
            backbone_loss(&b2, &xt, &target)
        });
        worst = if w.is_nan() { f64::INFINITY } else { worst.max(w) };
    }
    worst
}

/// Injection error and whether the forward pass equals a dense reference.
pub fn injection_fd(seed: u64) -> (f64, bool) {
    let mut r = rng(seed);
    let (n, p, d, rows) = (5, 2, 3, 4);
    let x = random_mat(&mut r, n, d);
    let prompts = random_mat(&mut r, p, d);
    let omega0 = random_mat(&mut r, 1, d);
    let table = random_mat(&mut r, rows, d);
    let slots: Vec<usize> = (0..n).map(|_| r.gen_range(0..=rows)).collect();
    let beta = 0.7;
    let w = random_mat(&mut r, n + p, d);
    let loss =
        |x: &Mat, pr: &Mat, o: &Mat, t: &Mat| (inject_inputs(x, pr, &slots, o.row(0), t, beta).unwrap() * &w).sum();

    // dense reference: the same additions in the same order
    let got = inject_inputs(&x, &prompts, &slots, omega0.row(0), &table, beta).unwrap();
    let mut reference = Mat::zeros((n + p, d));
    for i in 0..n + p {
        let z = if i < n { slots[i] } else { 0 };
        for j in 0..d {
            let base = if i < n { x[[i, j]] } else { prompts[[i - n, j]] };
            let add = if z == 0 { omega0[[0, j]] } else { table[[z - 1, j]] };
            reference[[i, j]] = base + beta * add;
        }
    }
    let exact = got == reference;

    let mut gp = Mat::zeros(prompts.raw_dim());
    let mut go = Mat::zeros(omega0.raw_dim());
    let mut gt = Mat::zeros(table.raw_dim());
    let gx = inject_backward(
        &w,
        &slots,
        beta,
        InjectionGrads {
            prompts: &mut gp,
            omega_0: &mut go,
            table: &mut gt,
        },
    );
    let mut worst = fd_worst(&flat(&gx), |i, dd| {
        loss(&perturbed(&x, i, dd), &prompts, &omega0, &table)
    })
    .0;
    worst = worst.max(
        fd_worst(&flat(&gp), |i, dd| {
            loss(&x, &perturbed(&prompts, i, dd), &omega0, &table)
        })
        .0,
    );
    worst = worst.max(
        fd_worst(&flat(&go), |i, dd| {
            loss(&x, &prompts, &perturbed(&omega0, i, dd), &table)
        })
        .0,
    );
    worst = worst.max(
        fd_worst(&flat(&gt), |i, dd| {
            loss(&x, &prompts, &omega0, &perturbed(&table, i, dd))
        })
        .0,
    );
    (worst, exact)
}

pub fn model_fixture(task: Task, seed: u64) -> (ModelState, Prepared) {
    let data = toy_data(10, 12, 6, seed);
    let cfg = TrainConfig {
        beta: 0.5,
        gen_weight: 0.7,
        align_weight: 1.3,
        ..toy_config(task)
    };
    let prep = prepare(&cfg, &data).unwrap();
    let mut state = init_state(&cfg, &prep).unwrap();
    // move away from the symmetric initialization
    let mut r = rng(seed + 1);
    for s in state.params.slices_mut() {
        for x in s.iter_mut() {
            *x += r.gen_range(-0.2..0.2);
        }
    }
    (state, prep)
}

/// Worst error per trainable block of the full objective, excluding `skip`.
pub fn model_fd(state: &ModelState, prep: &Prepared, users: &[usize], skip: &[&str]) -> Vec<(String, f64)> {
    let out = total_loss(state, prep, users, Terms::ALL).unwrap();
    let names: Vec<String> = out.grads.entries().into_iter().map(|(n, _, _)| n).collect();
    let grads: Vec<Vec<f64>> = out.grads.entries().into_iter().map(|(_, _, v)| v.to_vec()).collect();
    let mut report = Vec::new();
    for (k, name) in names.iter().enumerate() {
        if skip.contains(&name.as_str()) {
            continue;
        }
        let (w, _) = fd_worst(&grads[k], |i, d| {
            let mut s = state.clone();
            s.params.slices_mut()[k][i] += d;
            total_loss(&s, prep, users, Terms::ALL).unwrap().losses.total
        });
        report.push((name.clone(), if w.is_nan() { f64::INFINITY } else { w }));
    }
    report
}
