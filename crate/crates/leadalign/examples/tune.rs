// scratch: training-dynamics probe for desk-scale tuning
use leadalign::ecg::synth::{generate_records, SynthSpec};
use leadalign::ecg::ECGRecord;
use leadalign::encoder::EncoderConfig;
use leadalign::loss::LossConfig;
use leadalign::pairs::collate;
use leadalign::train::{PretrainConfig, Pretrainer, TowerInit};
use ndarray::Array2;

fn spread(v: &Array2<f64>) -> (f64, f64) {
    let n = v.nrows();
    let sims = v.dot(&v.t());
    let mut off = Vec::new();
    for i in 0..n { for j in 0..n { if i != j { off.push(sims[[i,j]]); } } }
    let mean = off.iter().sum::<f64>() / off.len() as f64;
    let var = off.iter().map(|x| (x-mean)*(x-mean)).sum::<f64>() / off.len() as f64;
    (mean, var.sqrt())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let temp: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.07);
    let bias: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(20);
    let n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(192);
    let t_len: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(10.0);

    let spec = SynthSpec {
        num_records: n + 32,
        duration_s: t_len,
        sampling_rate_hz: 500.0,
        noise_std: 0.02,
        seed: 42,
        train_frac: 1.0,
        valid_frac: 0.0,
        ..SynthSpec::default()
    };
    let records: Vec<ECGRecord> = generate_records(&spec).unwrap().into_iter().map(|(r, _)| r).collect();
    let refs: Vec<&ECGRecord> = records.iter().collect();
    let enc = EncoderConfig {
        in_leads: 1,
        stem_kernel: 15,
        stage_widths: vec![8, 16, 32, 64],
        blocks_per_stage: 1,
        embed_dim: 64,
        normalize_embeddings: true,
    };
    let cfg = PretrainConfig {
        batch_size: 32,
        epochs,
        peak_lr: lr,
        valid_size: 32,
        seed: 1,
        ..PretrainConfig::default()
    };
    let trainer = Pretrainer::new(cfg, &enc, LossConfig { temperature: temp, bias, ..LossConfig::default() }, "I");
    let train = &refs[..n];
    let valid: Vec<&ECGRecord> = refs[n..].to_vec();
    let mut state = trainer.init_state(train, TowerInit::Random, TowerInit::Random).unwrap();
    // M spread
    let vb = collate(&valid, "I").unwrap();
    let multi: Vec<_> = vb.pairs.iter().map(|p| p.multi_view.view()).collect();
    let ids = vb.record_ids();
    let m_emb = trainer.m_embeddings(&state, &multi, &ids).unwrap();
    let (m_mean, m_std) = spread(&m_emb.vectors);
    println!("M spread: mean off-diag {m_mean:.4} std {m_std:.4}");

    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        // crude fixed shuffle
        let n_ord = order.len();
        for i in 0..n_ord { order.swap(i, (i * 7919 + epoch * 104729) % n_ord); }
        let mut loss_sum = 0.0; let mut steps = 0;
        for chunk in order.chunks_exact(32) {
            let batch_recs: Vec<&ECGRecord> = chunk.iter().map(|&i| train[i]).collect();
            let batch = collate(&batch_recs, "I").unwrap();
            loss_sum += trainer.train_step(&mut state, &batch).unwrap();
            steps += 1;
        }
        if epoch % 2 == 0 || epoch == 1 {
            let (vl, r) = trainer.validate(&state, &valid).unwrap();
            // S spread on valid
            let single: Vec<_> = vb.pairs.iter().map(|p| p.single_view.view()).collect();
            let s_emb = leadalign::encoder::forward_stopgrad(&state.params_s, &trainer.enc_cfg_s, &single, &ids).unwrap();
            let (s_mean, s_std) = spread(&s_emb.vectors);
            // diag gap
            let sims = s_emb.vectors.dot(&m_emb.vectors.t());
            let diag: f64 = (0..sims.nrows()).map(|i| sims[[i,i]]).sum::<f64>() / sims.nrows() as f64;
            let all: f64 = sims.iter().sum::<f64>() / (sims.len()) as f64;
            println!("ep {epoch:>3}: loss {:.4} vl {vl:.4} r@1 {:.3} | S off-diag {s_mean:.3}±{s_std:.3} | diag {diag:.4} vs mean {all:.4}",
                loss_sum / steps as f64, r.iter().find(|(k,_)| *k==1).unwrap().1);
        }
    }
}
