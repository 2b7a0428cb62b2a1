use opendet::cli::{evaluate_model, train_model, RunConfig};
use opendet::model::PeVariant;
use opendet::synthscene::generate_dataset;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let mut cfg = RunConfig::default();
    cfg.optim_lr = lr;
    cfg.train_epochs = epochs;
    let ds = generate_dataset(&cfg.scene_config(), 1, cfg.data_scenes).unwrap();
    for variant in [PeVariant::Object, PeVariant::Ray, PeVariant::Point] {
        let mut c = cfg.clone();
        c.model_pe_variant = variant;
        let t = Instant::now();
        let model = train_model(&c, &ds, false).unwrap();
        let report = evaluate_model(&model, &ds.records[200..], c.eval_ap_threshold).unwrap();
        println!(
            "== {:>6} lr={lr} E={epochs}: {:.0}s TE {:.2?} AP {:.4?} | TE>40 {:.2?} AP>40 {:.4?} | px/obj L1>0 {:.2?}/{:.2?} L1>40 {:.2?}/{:.2?}",
            variant.name(),
            t.elapsed().as_secs_f64(),
            report.get("translation_error", ">0"),
            report.get("center_distance_ap", ">0"),
            report.get("translation_error", ">40"),
            report.get("center_distance_ap", ">40"),
            report.get("depth_l1_pixelwise", ">0"),
            report.get("depth_l1_objectwise", ">0"),
            report.get("depth_l1_pixelwise", ">40"),
            report.get("depth_l1_objectwise", ">40"),
        );
    }
}
