use mosm::*;

fn channel_mae(model: &GpModel, test: &Dataset, ch: usize) -> f64 {
    let rows: Vec<usize> = (0..test.len()).filter(|&r| test.channel(r) == ch).collect();
    let query = QuerySet {
        input_dim: 1,
        locations: rows.iter().map(|&r| test.location(r)[0]).collect(),
        channels: rows.iter().map(|&r| test.channel(r)).collect(),
    };
    let (mean, _) = model.posterior_diag(&query, false).unwrap();
    let truth: Vec<f64> = rows.iter().map(|&r| test.value(r)).collect();
    mae(&truth, &mean).unwrap()
}

fn run_mode(train: &Dataset, test: &Dataset, mode: ConstraintMode, q: usize, seed: u64,
            iters: usize, restarts: usize) -> (f64, [f64; 3]) {
    let k0 = initialize(train, q, seed).project(mode);
    let cfg = TrainConfig { max_iters: iters, tol: 1e-9, restarts, seed, ..Default::default() };
    let out = fit(train, &k0, &cfg).unwrap();
    let model = GpModel::new(out.kernel, train.clone()).unwrap();
    (out.nll, [channel_mae(&model, test, 0), channel_mae(&model, test, 1), channel_mae(&model, test, 2)])
}

#[test]
fn dbg_experiment() {
    for seed in 0u64..4 {
        let cfg = SynthConfig {
            train_counts: [200, 150, 150],
            seed,
            ..Default::default()
        };
        let out = make_synthetic(&cfg).unwrap();
        let (train, state) = data::normalize(&out.train).unwrap();
        let test = state.apply(&out.test).unwrap();

        let t0 = std::time::Instant::now();
        let (nll_mosm, mae_mosm) = run_mode(&train, &test, ConstraintMode::Mosm, 3, 100 + seed, 300, 4);
        let t_mosm = t0.elapsed().as_secs_f64();
        let t1 = std::time::Instant::now();
        let (nll_lmc, mae_lmc) = run_mode(&train, &test, ConstraintMode::SmLmc, 3, 100 + seed, 300, 4);
        let t_lmc = t1.elapsed().as_secs_f64();
        eprintln!("seed {seed}: MOSM nll={nll_mosm:.0} mae=[{:.3} {:.3} {:.3}] ({t_mosm:.0}s) | SM-LMC nll={nll_lmc:.0} mae=[{:.3} {:.3} {:.3}] ({t_lmc:.0}s)",
            mae_mosm[0], mae_mosm[1], mae_mosm[2], mae_lmc[0], mae_lmc[1], mae_lmc[2]);
    }
}
