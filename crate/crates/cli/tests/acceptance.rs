//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::fs;
use std::net::{TcpStream, UdpSocket};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use conductor_core::beam::{beam_step, BeamConfig};
use conductor_core::checkpoint;
use conductor_core::corpus::{self, CorpusWindow};
use conductor_core::ensemble::{
    active_set, mix, ConditionalMatrix, Ensemble, EnsembleMember, MixtureWeights, ACTIVE_THRESHOLD,
    REPLAY_CAPACITY, START_CHAR,
};
use conductor_core::lstm::{LstmState, ModelArchitecture, ModelCheckpoint, ModelParams};
use conductor_core::numeric::{Rng, Vector};
use conductor_core::training::{backward, train, TrainConfig};
use conductor_server::config::{ServerConfig, SessionConfig};
use conductor_server::osc;
use conductor_server::protocol::*;
use conductor_server::Server;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("mixing matches weighted-sum oracle", mixing_oracle),
        ("mixture invariants over fuzzed run", mixture_invariants),
        ("analytic gradients match finite differences", gradient_check),
        ("training memorizes a repeated pattern", training_convergence),
        ("one-hot weights select style, even weights blend", style_mixing),
        ("active-set rule and exact reactivation", active_set_rule),
        ("beam search matches exhaustive search", beam_oracle),
        ("protocol round trip, fuzzing, OSC parity", protocol),
        ("full pipeline is bit-reproducible", determinism),
        ("throughput falls with model count", throughput),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2}  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2}  {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn corpora() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpora")
}

fn random_dist(rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..128)
            .map(|_| if rng.next_f64() < 0.3 { 0.0 } else { rng.next_f64() })
            .collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            return v.iter().map(|x| x / s).collect();
        }
    }
}

fn random_weights(rng: &mut Rng, n: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.uniform(-3.0, 3.0));
    let mut w: Vec<f64> = (0..n)
        .map(|_| if rng.next_f64() < 0.25 { 0.0 } else { rng.next_f64() * scale })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[0] = scale;
    }
    w
}

fn random_models(n: usize, layers: &[usize], seed: u64) -> Vec<EnsembleMember> {
    (0..n)
        .map(|i| {
            let arch = ModelArchitecture::new(layers.to_vec()).unwrap();
            let ck = ModelCheckpoint::random(arch, seed + i as u64).unwrap();
            EnsembleMember::new(format!("r{i}"), Arc::new(ck))
        })
        .collect()
}

// 1
fn mixing_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = 1 + (rng.next_f64() * 8.0) as usize;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_dist(&mut rng)).collect();
        let w = random_weights(&mut rng, n);

        // oracle: threshold on the share of the total, weighted sum, normalize
        let total: f64 = w.iter().sum();
        let mut active: Vec<usize> = (0..n).filter(|&i| 20.0 * w[i] > total).collect();
        if active.is_empty() {
            let max = w.iter().cloned().fold(f64::MIN, f64::max);
            active.push(w.iter().position(|&x| x == max).unwrap());
        }
        let mut num = vec![0.0; 128];
        for &i in &active {
            for c in 0..128 {
                num[c] += w[i] * rows[i][c];
            }
        }
        let z: f64 = num.iter().sum();
        let expected: Vec<f64> = num.iter().map(|x| x / z).collect();

        let pi = MixtureWeights::new(w).unwrap();
        let got_active = active_set(&pi, ACTIVE_THRESHOLD).unwrap();
        ensure!(got_active == active, "case {case}: active {got_active:?} vs {active:?}");
        let omega = ConditionalMatrix::from_rows(rows.into_iter().map(Vector::from).collect());
        let rho = mix(&omega, &pi, &got_active).unwrap();
        for c in 0..128 {
            worst = worst.max((rho[c] - expected[c]).abs());
        }
    }
    ensure!(worst < 1e-12, "max abs deviation {worst:e}");
    for n in 1..=8 {
        let rows: Vec<Vector> = (0..n).map(|_| random_dist(&mut rng).into()).collect();
        let omega = ConditionalMatrix::from_rows(rows.clone());
        for i in 0..n {
            let pi = MixtureWeights::one_hot(n, i);
            let rho = mix(&omega, &pi, &active_set(&pi, ACTIVE_THRESHOLD).unwrap()).unwrap();
            ensure!(rho == rows[i], "one-hot n={n} i={i} not exact");
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "took {secs:.2}s");
    Ok(format!("1000 cases, max deviation {worst:.1e}, one-hot exact, {:.0} ms", secs * 1e3))
}

// 2
fn mixture_invariants() -> Outcome {
    let mut main = Ensemble::new(random_models(4, &[16], 200), MixtureWeights::uniform(4)).unwrap();
    let mut twin = Ensemble::new(random_models(4, &[16], 200), MixtureWeights::uniform(4)).unwrap();
    let mut rng = Rng::new(2);
    let mut sample_rng = Rng::new(3);
    let (mut worst_sum, mut worst_scale) = (0.0f64, 0.0f64);
    for step in 0..10_000 {
        let w = random_weights(&mut rng, 4);
        let k = 10f64.powf(rng.uniform(-3.0, 3.0));
        let pi = MixtureWeights::new(w).unwrap();
        let scaled = pi.scaled(k).unwrap();
        let e = main.step_with(&pi, &mut sample_rng).unwrap();
        let f = twin.step_forced(&scaled, e.char).unwrap();
        ensure!(e.rho.iter().all(|&p| p >= 0.0), "negative entry at step {step}");
        worst_sum = worst_sum.max((e.rho.iter().sum::<f64>() - 1.0).abs());
        for (a, b) in e.rho.iter().zip(&f.rho) {
            worst_scale = worst_scale.max((a - b).abs());
        }
    }
    ensure!(worst_sum <= 1e-9, "sum deviates by {worst_sum:e}");
    ensure!(worst_scale <= 1e-12, "rescaling moved rho by {worst_scale:e}");
    Ok(format!("10000 steps, |sum-1| <= {worst_sum:.1e}, rescaling shift <= {worst_scale:.1e}"))
}

// 3
fn oracle_loss(params: &ModelParams, window: &CorpusWindow<'_>, init: &LstmState) -> f64 {
    let mut hs: Vec<Vec<f64>> = init.layers.iter().map(|l| l.h.to_vec()).collect();
    let mut cs: Vec<Vec<f64>> = init.layers.iter().map(|l| l.c.to_vec()).collect();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut total = 0.0;
    for t in 0..window.len() {
        let mut x = vec![0.0; 128];
        x[window.input[t] as usize] = 1.0;
        for (k, layer) in params.layers.iter().enumerate() {
            let n = layer.w_h.cols();
            let z = |row: usize| {
                let mut s = layer.b[row];
                for (d, xv) in x.iter().enumerate() {
                    s += layer.w_x.get(row, d) * xv;
                }
                for (j, hv) in hs[k].iter().enumerate() {
                    s += layer.w_h.get(row, j) * hv;
                }
                s
            };
            let mut h = vec![0.0; n];
            let mut c = vec![0.0; n];
            for j in 0..n {
                c[j] = sig(z(n + j)) * cs[k][j] + sig(z(j)) * z(2 * n + j).tanh();
                h[j] = sig(z(3 * n + j)) * c[j].tanh();
            }
            hs[k] = h.clone();
            cs[k] = c;
            x = h;
        }
        let logits: Vec<f64> = (0..128)
            .map(|r| params.b_y[r] + (0..x.len()).map(|j| params.w_y.get(r, j) * x[j]).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += log_z - logits[window.target[t] as usize];
    }
    total / window.len() as f64
}

fn gradient_check() -> Outcome {
    const EPS: f64 = 1e-5;
    // components near zero are judged on absolute error 1e-9 instead
    const REL_FLOOR: f64 = 1e-5;
    let started = Instant::now();
    let mut report = Vec::new();
    for (layers, seed) in [(vec![8], 31), (vec![8, 8], 32)] {
        let arch = ModelArchitecture::new(layers.clone()).unwrap();
        let ck = ModelCheckpoint::random(arch.clone(), seed).unwrap();
        let window = corpus::windows(b"finite diff", 10, 10).unwrap().next().unwrap();
        let mut init = ck.fresh_state();
        let mut rng = Rng::new(seed);
        for l in &mut init.layers {
            l.h.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
            l.c.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
        }
        let (analytic, _) = backward(&ck, &window, &init, None).unwrap();
        let mut params = ck.params.clone();
        let mut worst = 0.0f64;
        let mut count = 0;
        for ti in 0..params.tensors().len() {
            for j in 0..params.tensors()[ti].len() {
                let orig = params.tensors()[ti][j];
                params.tensors_mut()[ti][j] = orig + EPS;
                let plus = oracle_loss(&params, &window, &init);
                params.tensors_mut()[ti][j] = orig - EPS;
                let minus = oracle_loss(&params, &window, &init);
                params.tensors_mut()[ti][j] = orig;
                let fd = (plus - minus) / (2.0 * EPS);
                let a = analytic.tensors()[ti][j];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR));
                count += 1;
            }
        }
        ensure!(worst < 1e-4, "{layers:?}: max rel err {worst:e}");
        report.push(format!("{layers:?} {count} params max rel err {worst:.1e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(report.join("; "))
}

// 4
fn training_convergence() -> Outcome {
    const CYCLE: &str = "hello world\n";
    let text = CYCLE.repeat(1024 / CYCLE.len());
    let arch = ModelArchitecture::new(vec![32]).unwrap();
    let config = TrainConfig { max_steps: 2000, ..TrainConfig::default() };
    let started = Instant::now();
    let (ck, report) = train("pattern", text.as_bytes(), &arch, &config).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let nll = report.final_nll().unwrap();
    ensure!(nll < 0.1, "final nll {nll:.4}");
    let mut state = ck.fresh_state();
    let mut dist = ck.feed(&mut state, b"he").unwrap();
    let mut out = Vec::new();
    for _ in 0..200 {
        let c = dist.argmax() as u8;
        out.push(c);
        dist = ck.advance(&mut state, c);
    }
    let expected: Vec<u8> = CYCLE.bytes().cycle().skip(2).take(200).collect();
    ensure!(out == expected, "argmax output {:?}", String::from_utf8_lossy(&out));
    ensure!(secs < 300.0, "took {secs:.0}s");
    Ok(format!("{} bytes, nll {nll:.4} after 2000 steps, 200-char cycle reproduced", text.len()))
}

// 5
fn style_mixing() -> Outcome {
    let latin = fs::read_to_string(corpora().join("cicero-de-finibus.txt")).unwrap();
    let mut upper = String::new();
    for c in latin.chars() {
        let c = if c.is_ascii_alphabetic() { c.to_ascii_uppercase() } else { ' ' };
        if !(c == ' ' && upper.ends_with(' ')) {
            upper.push(c);
        }
        if upper.len() >= 6000 {
            break;
        }
    }
    let mut digits = String::new();
    let mut x: u64 = 7;
    while digits.len() < 6000 {
        x = x * 48271 % 2147483647;
        digits.push_str(&format!("{}\n", x % 1_000_000));
    }
    let in_upper = |c: u8| c.is_ascii_uppercase() || c == b' ';
    let in_digits = |c: u8| c.is_ascii_digit() || c == b'\n';

    let arch = ModelArchitecture::new(vec![32]).unwrap();
    let config = TrainConfig {
        batch_size: 8,
        learning_rate: 1e-2,
        max_steps: 400,
        seed: 5,
        ..TrainConfig::default()
    };
    let (a, _) = train("upper", upper.as_bytes(), &arch, &config).unwrap();
    let (b, _) = train("digits", digits.as_bytes(), &arch, &config).unwrap();
    let models = [Arc::new(a), Arc::new(b)];
    let run = |w: Vec<f64>| -> Vec<u8> {
        let members = models
            .iter()
            .enumerate()
            .map(|(i, m)| EnsembleMember::new(format!("m{i}"), m.clone()))
            .collect();
        let mut ens = Ensemble::new(members, MixtureWeights::new(w).unwrap()).unwrap();
        let mut rng = Rng::new(11);
        (0..500).map(|_| ens.step(&mut rng).unwrap().char).collect()
    };
    let share = |text: &[u8], f: &dyn Fn(u8) -> bool| {
        text.iter().filter(|&&c| f(c)).count() as f64 / text.len() as f64
    };
    let only_a = share(&run(vec![1.0, 0.0]), &in_upper);
    let only_b = share(&run(vec![0.0, 1.0]), &in_digits);
    let mixed = run(vec![0.5, 0.5]);
    let (mix_a, mix_b) = (share(&mixed, &in_upper), share(&mixed, &in_digits));
    ensure!(only_a > 0.95, "uppercase model own-alphabet share {only_a:.3}");
    ensure!(only_b > 0.95, "digit model own-alphabet share {only_b:.3}");
    ensure!(mix_a > 0.0 && mix_b > 0.0, "mixed output shares {mix_a:.3} / {mix_b:.3}");
    Ok(format!(
        "own-alphabet {:.1}% / {:.1}%, even mix {:.1}% upper + {:.1}% digits",
        only_a * 100.0,
        only_b * 100.0,
        mix_a * 100.0,
        mix_b * 100.0
    ))
}

// 6
fn active_set_rule() -> Outcome {
    let mut ens = Ensemble::new(random_models(4, &[16, 16], 300), MixtureWeights::uniform(4)).unwrap();
    let mut rng = Rng::new(6);
    let mut skipped = 0;
    for step in 0..2000 {
        let mut w: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
        for x in &mut w {
            if rng.next_f64() < 0.4 {
                *x *= 0.05;
            }
        }
        let total: f64 = w.iter().sum();
        let before: Vec<u64> = ens.members().iter().map(|m| m.forward_count()).collect();
        let e = ens.step_with(&MixtureWeights::new(w.clone()).unwrap(), &mut rng).unwrap();
        for (i, m) in ens.members().iter().enumerate() {
            let ran = m.forward_count() > before[i];
            let eligible = w[i] / total > ACTIVE_THRESHOLD;
            ensure!(ran == eligible, "step {step}: model {i} share {:.4} ran={ran}", w[i] / total);
            ensure!(e.active.contains(&i) == eligible, "step {step}: active list {:?}", e.active);
            skipped += !ran as usize;
        }
    }

    let mut gaps_ok = 0;
    for gap in [1, 2, 5, 17, 40, 79, REPLAY_CAPACITY] {
        let mut ens = Ensemble::new(random_models(2, &[16, 16], 400), MixtureWeights::uniform(2)).unwrap();
        let mut rng = Rng::new(gap as u64);
        let mut history = vec![START_CHAR];
        for (w, n) in [(vec![1.0, 1.0], 150), (vec![1.0, 0.0], gap), (vec![1.0, 1.0], 5)] {
            let pi = MixtureWeights::new(w).unwrap();
            for _ in 0..n {
                history.push(ens.step_with(&pi, &mut rng).unwrap().char);
            }
        }
        for m in ens.members() {
            let mut s = m.checkpoint.fresh_state();
            m.checkpoint.feed(&mut s, &history);
            ensure!(m.state().bit_eq(&s), "gap {gap}: {} state differs", m.name);
        }
        gaps_ok += 1;
    }
    Ok(format!("{skipped} skipped forwards over 2000 steps, none below threshold ran; {gaps_ok} reactivation gaps up to {REPLAY_CAPACITY} bit-exact"))
}

// 7
const LIVE: [u8; 4] = *b"wxyz";

fn four_char_model(seed: u64) -> ModelCheckpoint {
    let mut ck = ModelCheckpoint::random(ModelArchitecture::new(vec![6]).unwrap(), seed).unwrap();
    let mut rng = Rng::new(seed + 1000);
    for c in 0..128u8 {
        ck.params.b_y[c as usize] = if LIVE.contains(&c) { rng.uniform(-1.0, 1.0) } else { -1e3 };
    }
    ck
}

fn beam_oracle() -> Outcome {
    let build = |seeds: &[u64], w: Vec<f64>| {
        let members = seeds
            .iter()
            .map(|&s| EnsembleMember::new(format!("c{s}"), Arc::new(four_char_model(s))))
            .collect();
        let mut ens = Ensemble::new(members, MixtureWeights::new(w).unwrap()).unwrap();
        ens.prime("wxyzzy");
        ens
    };
    let mut matched = 0;
    for seeds in [[1u64, 2], [3, 4], [5, 6], [7, 8], [9, 10]] {
        let mut ens = build(&seeds, vec![0.55, 0.45]);
        let pi = ens.weights();
        let history = ens.history().to_vec();
        let models: Vec<Arc<ModelCheckpoint>> =
            ens.members().iter().map(|m| m.checkpoint.clone()).collect();
        let mut best: Option<(Vec<u8>, f64)> = None;
        let mut paths = 0;
        for code in 0..64usize {
            let path = [LIVE[code / 16], LIVE[code / 4 % 4], LIVE[code % 4]];
            let mut states: Vec<LstmState> = models.iter().map(|m| m.fresh_state()).collect();
            let mut dists: Vec<Vector> =
                models.iter().zip(&mut states).map(|(m, s)| m.feed(s, &history).unwrap()).collect();
            let mut score = 0.0;
            for &c in &path {
                let omega = ConditionalMatrix::from_rows(dists.clone());
                score += mix(&omega, &pi, &[0, 1]).unwrap()[c as usize].ln();
                for k in 0..models.len() {
                    let (d, s) = models[k].forward_char(&states[k], c as usize).unwrap();
                    dists[k] = d;
                    states[k] = s;
                }
            }
            paths += 1;
            if best.as_ref().map_or(true, |(_, b)| score > *b) {
                best = Some((path.to_vec(), score));
            }
        }
        let (path, score) = best.unwrap();
        let cfg = BeamConfig { width: 64, depth: 3, branch: 4, commit: 1, stochastic: false };
        let out = beam_step(&mut ens, &pi, &cfg, &mut Rng::new(0)).unwrap();
        ensure!(paths == 64 && out.finalists.len() == 64, "expected 64 paths");
        ensure!(out.best().chars == path, "{seeds:?}: beam {:?} vs {:?}", out.best().chars, path);
        ensure!(out.best().score() == score, "{seeds:?}: score {} vs {score}", out.best().score());
        matched += 1;
    }

    let mut beam = build(&[21, 22, 23], vec![0.5, 0.3, 0.2]);
    let mut plain = build(&[21, 22, 23], vec![0.5, 0.3, 0.2]);
    plain.set_temperature(0.0).unwrap();
    let pi = beam.weights();
    let mut rng = Rng::new(1);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for _ in 0..300 {
        a.extend(beam_step(&mut beam, &pi, &BeamConfig::greedy(), &mut rng).unwrap().committed);
        b.push(plain.step(&mut rng).unwrap().char);
    }
    ensure!(a == b, "greedy beam diverged from argmax decoding");
    Ok(format!("{matched}/5 ensembles match brute force over 64 paths with equal scores; greedy identical for 300 chars"))
}

// 8
fn random_string(rng: &mut Rng) -> String {
    let pool = ["", "main", "π → ρ", "a\"b\\c", "\n\t", "\u{1F3B9}"];
    let mut s = String::new();
    for _ in 0..(rng.next_f64() * 4.0) as usize {
        s.push_str(pool[(rng.next_f64() * pool.len() as f64) as usize]);
    }
    s
}

fn random_floats(rng: &mut Rng, max: usize) -> Vec<f64> {
    let n = (rng.next_f64() * max as f64) as usize;
    (0..n)
        .map(|_| match (rng.next_f64() * 4.0) as u32 {
            0 => 0.0,
            1 => rng.next_f64(),
            2 => rng.uniform(-1e9, 1e9),
            _ => 1.0 / 3.0,
        })
        .collect()
}

fn random_message(rng: &mut Rng, kind: usize) -> WireMessage {
    let u = |rng: &mut Rng| (rng.next_f64() * 1e15) as u64;
    let mode = |rng: &mut Rng| {
        if rng.next_f64() < 0.5 {
            DecodeMode::Sample
        } else {
            DecodeMode::Beam(BeamConfig {
                width: 1 + u(rng) as usize % 64,
                depth: 1 + u(rng) as usize % 8,
                branch: 1 + u(rng) as usize % 128,
                commit: 1,
                stochastic: rng.next_f64() < 0.5,
            })
        }
    };
    match kind {
        0 => WireMessage::SetWeights { weights: random_floats(rng, 9) },
        1 => WireMessage::Prime { text: random_string(rng) },
        2 => WireMessage::Pause,
        3 => WireMessage::Resume,
        4 => WireMessage::Reset,
        5 => WireMessage::SetTemperature { temperature: rng.uniform(0.0, 3.0) },
        6 => WireMessage::SetDecodeMode { mode: mode(rng) },
        7 => WireMessage::ListModels,
        8 => WireMessage::ModelList {
            models: (0..u(rng) % 4)
                .map(|i| ModelInfo {
                    index: i as usize,
                    name: random_string(rng),
                    layer_sizes: vec![1 + u(rng) as usize % 512],
                    param_count: u(rng) as usize,
                    corpus: random_string(rng),
                })
                .collect(),
        },
        9 => {
            let dist = random_dist(rng);
            WireMessage::Event(WireEvent {
                step: u(rng),
                char: (u(rng) % 128) as u8,
                rho: dist.clone(),
                rows: vec![WireRow::from_dist(0, &dist), WireRow::from_dist(3, &random_dist(rng))],
                weights: random_floats(rng, 8),
                active: vec![0, 3],
                timestamp_ms: (rng.next_f64() < 0.5).then(|| u(rng)),
            })
        }
        10 => WireMessage::Status(StatusInfo {
            state: [RunState::Running, RunState::Paused, RunState::Stopped][u(rng) as usize % 3],
            weights: random_floats(rng, 8),
            temperature: rng.next_f64(),
            decode_mode: mode(rng),
            step: u(rng),
            ack: (rng.next_f64() < 0.5).then(|| u(rng)),
            throughput: (rng.next_f64() < 0.5).then(|| ThroughputStats {
                chars_per_sec: rng.next_f64() * 100.0,
                latency_p50_ms: rng.next_f64(),
                latency_p95_ms: rng.next_f64(),
                latency_max_ms: rng.next_f64(),
                active_models: u(rng) as usize % 8,
                steps: u(rng),
            }),
        }),
        _ => WireMessage::error(&random_string(rng), random_string(rng), (rng.next_f64() < 0.5).then(|| u(rng))),
    }
}

fn protocol() -> Outcome {
    let mut rng = Rng::new(8);
    let mut frames = Vec::new();
    for i in 0..6000 {
        let env = Envelope::new(random_string(&mut rng), (rng.next_f64() * 1e12) as u64, random_message(&mut rng, i % 12));
        let frame = env.to_frame();
        let (parsed, used) = decode_frame(&frame).unwrap().unwrap();
        let parsed = parsed.map_err(|e| format!("{}: {e}", env.message.type_tag()))?;
        ensure!(used == frame.len() && parsed == env, "round trip changed a {}", env.message.type_tag());
        ensure!(parsed.to_frame() == frame, "re-encoding changed a {}", env.message.type_tag());
        frames.push(frame);
    }

    let mut fuzzed = 0;
    for i in 0..20_000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let n = (rng.next_f64() * 300.0) as usize;
            (0..n).map(|_| (rng.next_f64() * 256.0) as u8).collect()
        } else {
            let mut f = frames[i % frames.len()].clone();
            for _ in 0..1 + (rng.next_f64() * 6.0) as usize {
                let at = (rng.next_f64() * f.len() as f64) as usize;
                f[at] = (rng.next_f64() * 256.0) as u8;
            }
            f.truncate((rng.next_f64() * (f.len() + 1) as f64) as usize);
            f
        };
        let _ = decode_frame(&bytes);
        let _ = parse_payload(&bytes);
        let _ = read_frame(&mut &bytes[..]);
        let _ = osc::parse_weights(&bytes);
        fuzzed += 1;
    }

    // OSC and stream SetWeights land on the same weights
    let dir = tempfile::tempdir().unwrap();
    let mut entries = Vec::new();
    for i in 0..3u64 {
        let ck = ModelCheckpoint::random(ModelArchitecture::new(vec![8]).unwrap(), 80 + i).unwrap();
        checkpoint::save(&ck, dir.path().join(format!("m{i}.ckpt"))).unwrap();
        entries.push(serde_json::json!({"name": format!("m{i}"), "path": format!("m{i}.ckpt")}));
    }
    let manifest = dir.path().join("models.json");
    fs::write(&manifest, serde_json::json!({ "models": entries }).to_string()).unwrap();
    let server = Server::start(&ServerConfig {
        listen: "127.0.0.1:0".into(),
        osc: Some("127.0.0.1:0".into()),
        client_queue: 64,
        manifest,
        session: SessionConfig { start_paused: true, ..SessionConfig::default() },
    })
    .unwrap();
    let handle = server.handle();
    let mut tcp = TcpStream::connect(server.tcp_addr()).unwrap();
    tcp.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let udp = UdpSocket::bind("127.0.0.1:0").unwrap();
    let osc_addr = server.osc().unwrap().local_addr();
    let mut compared = 0;
    for (i, w) in [[0.2f32, 0.3, 0.5], [0.7, 0.1, 0.2], [1.0, 0.0, 0.0], [0.3, 0.3, 0.4]].iter().enumerate() {
        let as_f64: Vec<f64> = w.iter().map(|&x| x as f64).collect();
        let seq = 1000 + i as u64;
        write_frame(&mut tcp, &Envelope::new("main", seq, WireMessage::SetWeights { weights: as_f64.clone() })).unwrap();
        loop {
            let payload = read_frame(&mut tcp).unwrap().unwrap().unwrap();
            if let WireMessage::Status(s) = parse_payload(&payload).unwrap().message {
                if s.ack == Some(seq) {
                    break;
                }
            }
        }
        let via_stream = handle.status().weights;
        handle.set_weights(vec![1.0, 1.0, 1.0]).unwrap();
        let accepted = server.osc().unwrap().accepted();
        udp.send_to(&osc::encode_weights(w), osc_addr).unwrap();
        let deadline = Instant::now() + Duration::from_secs(10);
        while server.osc().unwrap().accepted() == accepted && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(2));
        }
        let via_osc = handle.status().weights;
        ensure!(via_stream == as_f64 && via_osc == as_f64, "stream {via_stream:?} osc {via_osc:?}");
        compared += 1;
    }
    udp.send_to(&osc::encode_weights(&[0.5, 0.5]), osc_addr).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while server.osc().unwrap().dropped() == 0 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(2));
    }
    ensure!(server.osc().unwrap().dropped() == 1, "wrong-length OSC packet not dropped");
    Ok(format!("6000 round trips over 12 message types, {fuzzed} fuzzed inputs, {compared} OSC/stream updates identical"))
}

// 9
fn conductor(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_conductor"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let latin = fs::read(corpora().join("cicero-de-finibus.txt")).unwrap();
    let code = fs::read(corpora().join("sqlite3-header.txt")).unwrap();
    fs::write(dir.join("latin.txt"), &latin[..4000]).unwrap();
    fs::write(dir.join("code.txt"), &code[..4000]).unwrap();
    for name in ["latin", "code"] {
        conductor(dir, &[
            "train", "--corpus", &format!("{name}.txt"), "--out", &format!("{name}.ckpt"),
            "--layers", "24", "--steps", "60", "--batch", "4", "--dropout", "0.1",
            "--rng-seed", "3", "--quiet",
        ])?;
    }
    fs::write(
        dir.join("models.json"),
        r#"{"models":[{"name":"latin","path":"latin.ckpt"},{"name":"code","path":"code.ckpt"}]}"#,
    )
    .unwrap();
    fs::write(
        dir.join("pi.jsonl"),
        "{\"step\":0,\"weights\":[1,0]}\n{\"step\":100,\"weights\":[0.5,0.5]}\n{\"step\":200,\"weights\":[0,1]}\n",
    )
    .unwrap();
    let transcript = conductor(dir, &[
        "generate", "--manifest", "models.json", "--schedule", "pi.jsonl", "--chars", "300",
        "--seed-text", "Quae", "--rng-seed", "9", "--events", "events.jsonl",
    ])?;
    let beam = conductor(dir, &[
        "generate", "--manifest", "models.json", "--weights", "0.6,0.4", "--chars", "60",
        "--beam", "--beam-stochastic", "--rng-seed", "4",
    ])?;
    let mut files = vec![("transcript".to_string(), transcript), ("beam".to_string(), beam)];
    for f in ["latin.ckpt", "code.ckpt", "events.jsonl", "latin.corpus.json"] {
        files.push((f.to_string(), fs::read(dir.join(f)).unwrap()));
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure!(x == y, "{name} differs between runs");
    }
    let events = first.iter().find(|(n, _)| n == "events.jsonl").unwrap();
    let lines = events.1.split(|&c| c == b'\n').filter(|l| !l.is_empty()).count();
    ensure!(lines == 300, "{lines} event lines");
    Ok(format!("{} artifacts identical across two runs (checkpoints, transcripts, 300-line event log)", first.len()))
}

// 10
fn throughput() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let csv = conductor(dir.path(), &[
        "bench", "--layers", "128,128", "--counts", "1,2,4,8", "--steps", "60", "--trials", "3",
    ])?;
    let text = String::from_utf8(csv).unwrap();
    let rows: Vec<(usize, usize, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    ensure!(rows.iter().map(|r| r.0).collect::<Vec<_>>() == vec![1, 2, 4, 8], "rows {rows:?}");
    ensure!(rows.iter().all(|r| r.0 == r.1), "not all models active: {rows:?}");
    for w in rows.windows(2) {
        ensure!(w[1].2 <= w[0].2, "throughput rose from {} to {} models: {rows:?}", w[0].0, w[1].0);
    }
    Ok(rows
        .iter()
        .map(|(k, _, r)| format!("{k} models {r:.0} chars/s"))
        .collect::<Vec<_>>()
        .join(", "))
}
