mod common;

use zrl_core::checkpoint;
use zrl_core::oracle::finite_diff_params;
use zrl_core::policy::{
    draw, logprob_grad, nucleus, sample_internal, snapshot_reference, temper, token_kl, ArchDescriptor,
    Coefficients, PolicyParams, SamplingSettings, Trajectory, ANS, EOS,
};
use zrl_core::{seed, Error};

use common::*;

#[test]
fn draws_match_the_tempered_nucleus_distribution() {
    let logp: Vec<f64> = [0.4f64, 0.25, 0.2, 0.1, 0.05].iter().map(|p| p.ln()).collect();
    for (t, top_p) in [(1.0, 1.0), (0.6, 0.999), (1.0, 0.8)] {
        let settings = SamplingSettings {
            temperature: t,
            top_p,
            max_response_len: 4,
        };
        // Oracle: temper, keep the smallest prefix reaching top_p, renormalise.
        let w: Vec<f64> = logp.iter().map(|l| (l / t).exp()).collect();
        let z: f64 = w.iter().sum();
        let q: Vec<f64> = w.iter().map(|x| x / z).collect();
        let mut kept = vec![0.0; q.len()];
        let mut cum = 0.0;
        for i in 0..q.len() {
            kept[i] = q[i];
            cum += q[i];
            if top_p < 1.0 && cum >= top_p {
                break;
            }
        }
        let mass: f64 = kept.iter().sum();
        let expected: Vec<f64> = kept.iter().map(|x| x / mass).collect();

        let n = 10_000;
        let mut counts = vec![0usize; q.len()];
        let mut rng = seed::rng(5);
        for _ in 0..n {
            let (i, lq) = draw(&logp, &settings, &mut rng);
            assert!((lq - temper(&logp, t)[i]).abs() < 1e-12);
            counts[i] += 1;
        }
        for (c, p) in counts.iter().zip(&expected) {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() <= 3.0 * sigma + 1e-12, "T={t} top_p={top_p}: {freq} vs {p}");
        }
        assert_eq!(nucleus(&temper(&logp, t), top_p).len(), expected.iter().filter(|&&p| p > 0.0).count());
    }
}

#[test]
fn greedy_and_certain_tokens() {
    let logp = [-3.0f64, -0.1, -2.5];
    let greedy = SamplingSettings::greedy(4);
    let mut rng = seed::rng(0);
    assert!((0..50).all(|_| draw(&logp, &greedy, &mut rng).0 == 1));
    let certain = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
    assert!((0..50).all(|_| draw(&certain, &sampling(4), &mut rng).0 == 1));
}

#[test]
fn trajectories_respect_length_and_logprob_contracts() {
    let p = tiny_params(3, 0.8);
    for s in 0..30 {
        let inst = instance(2, 2, s);
        let t = sample_internal(&p, &prompt(&p, &inst), &sampling(5), &mut seed::rng(s)).unwrap();
        assert!(t.len() <= 5 && !t.is_empty());
        assert_eq!(t.logprobs.len(), t.len());
        assert!(t.logprobs.iter().all(|&l| l <= 0.0));
        assert_eq!(t.truncated, t.response.last() != Some(&EOS));
    }
}

#[test]
fn gradients_match_finite_differences() {
    let p = tiny_params(1, 0.5);
    assert!(p.num_params() <= 1000, "{}", p.num_params());
    let r = snapshot_reference(&tiny_params(2, 0.5), 0);
    for s in 0..3 {
        let inst = instance(2, 2, s);
        let t = sample_internal(&p, &prompt(&p, &inst), &sampling(5), &mut seed::rng(s)).unwrap();
        let coeffs = Coefficients::PerPosition((0..t.len()).map(|i| 0.5 - 0.3 * i as f64).collect());
        let (_, g) = logprob_grad(&p, &t, &coeffs).unwrap();
        let fd = finite_diff_params(&p, |q| Ok(logprob_grad(q, &t, &coeffs)?.0), 1e-5).unwrap();
        assert!(rel_err(&g, &fd) < 1e-4);
        let (_, gk) = token_kl(&p, &r, &t).unwrap();
        let fdk = finite_diff_params(&p, |q| Ok(token_kl(q, &r, &t)?.0), 1e-5).unwrap();
        assert!(rel_err(&gk, &fdk) < 1e-4);
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

#[test]
fn kl_matches_the_closed_form_on_single_positions() {
    let p = tiny_params(4, 0.9);
    let r = snapshot_reference(&tiny_params(5, 0.9), 0);
    let inst = instance(2, 2, 9);
    let pr = prompt(&p, &inst);
    let mut t = Trajectory::new(pr.clone(), 1.0);
    t.response = vec![ANS];
    let (kl, _) = token_kl(&p, &r, &t).unwrap();
    let lp = p.forward(&pr, pr.len()).unwrap().logp(0).to_vec();
    let lq = r.params().forward(&pr, pr.len()).unwrap().logp(0).to_vec();
    let direct: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    assert!((kl - direct).abs() < 1e-12);
}

#[test]
fn checkpoints_round_trip_and_name_mismatches() {
    let p = tiny_params(6, 0.3);
    let mut buf = Vec::new();
    checkpoint::write(&mut buf, &p, 17).unwrap();
    let (back, header) = checkpoint::read(&buf[..], Some(p.arch())).unwrap();
    assert_eq!(back, p);
    assert_eq!(header.iteration, 17);
    assert_eq!(header.num_params, p.num_params());

    let wider = ArchDescriptor {
        heads: 3,
        ..tiny_arch()
    };
    match checkpoint::read(&buf[..], Some(&wider)) {
        Err(Error::ArchMismatch { field, .. }) => assert_eq!(field, "heads"),
        other => panic!("expected mismatch, got {other:?}"),
    }
    let truncated = &buf[..buf.len() - 8];
    assert!(matches!(checkpoint::read(truncated, None), Err(Error::Config(_))));
    assert!(PolicyParams::from_values(tiny_arch(), vec![0.0; 3]).is_err());
}
