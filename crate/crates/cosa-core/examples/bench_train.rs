use cosa_core::config::{Toggles, TrainConfig};
use cosa_core::data::{generate_synthetic, Dataset, Split, SyntheticSpec, TaskKind};
use cosa_core::diagnostics::similarity_curves;
use cosa_core::trainer;

fn main() {
    let epochs: u32 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let margin: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let dir = std::env::temp_dir().join(format!("cosa_tau_{margin}"));
    let _ = std::fs::remove_dir_all(&dir);
    let data_dir = dir.join("data");
    let spec = SyntheticSpec {
        seed: 7, train_size: 400, valid_size: 100, test_size: 200,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, &data_dir).unwrap();
    let manifest = data_dir.join("manifest.json");
    let dataset = Dataset::load(&manifest).unwrap();
    let t_mid = dataset.manifest.seq_len / 2;
    let base = Toggles::baseline();
    for (name, toggles) in [
        ("baseline", base),
        ("only-msd", Toggles { msd: true, msd_modality: true, msd_reconstruct: true, msd_contrast: true, ..base }),
        ("only-dpsr", Toggles { dpsr: true, eta: true, ..base }),
        ("full", Toggles::default()),
    ] {
        let mut cfg = TrainConfig::desk(TaskKind::Msa);
        cfg.seed = 1;
        cfg.epochs = epochs;
        cfg.modules = toggles;
        cfg.contrast_margin = Some(margin);
        let run_dir = dir.join(format!("run-{name}"));
        trainer::train(&cfg, &dataset, &manifest, &run_dir, None).unwrap();
        let (_, model) = trainer::load_model(&run_dir, &dataset, "best").unwrap();
        let metrics = trainer::metrics_for_split(&model, &dataset, Split::Test).unwrap();
        let log = trainer::read_metrics_log(&run_dir).unwrap();
        let dratio = log.last().unwrap().msd_probe_dist / log[0].msd_probe_dist.max(1e-9);
        let show = |rec: bool| {
            let curves = similarity_curves(&model, &dataset, Split::Test, rec).unwrap();
            let c: Vec<f64> = (0..curves[0].len()).map(|k| (curves[0][k] + curves[1][k] + curves[2][k]) / 3.0).collect();
            format!("[{:.2} {:.2} {:.2}] gap {:+.3}", c[0], c[t_mid - 1], c[c.len() - 1], c[0] - c[t_mid - 1])
        };
        println!(
            "{name:10} mae {:.4} | recon {} | raw {} | dist x{dratio:.1}",
            metrics["mae"].as_f64().unwrap(), show(toggles.dpsr), show(false)
        );
    }
}
