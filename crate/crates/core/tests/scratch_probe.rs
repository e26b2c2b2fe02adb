use sdfrec_core::field::SdfFieldModel;

#[test]
fn probe_trained_field() {
    let path = std::env::var("PROBE_CKPT").unwrap_or_default();
    if path.is_empty() { return; }
    let (model, step) = SdfFieldModel::load_checkpoint(path.as_ref()).unwrap();
    println!("step {step}");
    for r in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 0.95, 1.04] {
        let f = model.sdf_value([0.0, 0.0, r]);
        let j = model.sdf_jet([0.0, 0.0, r]);
        let g = (j.d[0].powi(2) + j.d[1].powi(2) + j.d[2].powi(2)).sqrt();
        println!("r={r:.2}  f={f:+.4}  |grad|={g:.3}   (sdf target {:+.3})", r - 0.5);
    }
}
