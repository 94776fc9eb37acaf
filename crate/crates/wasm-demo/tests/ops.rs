use ddetect_wasm_demo::{distill_demo, probe_overlay, score_explorer, DistillRequest, ExplorerRequest, OverlayRequest};

#[test]
fn rotated_copy_scores_above_unrelated() {
    let r = score_explorer(&ExplorerRequest::default()).unwrap();
    assert!(r.related.acs > r.unrelated.acs);
    assert!(r.related.cka > r.unrelated.cka);
    assert!(r.related.p_value < 0.05);
    assert!(score_explorer(&ExplorerRequest {
        n: 2,
        ..Default::default()
    })
    .is_err());
}

#[test]
fn distill_demo_is_deterministic_and_shaped() {
    let req = DistillRequest::default();
    let a = distill_demo(&req).unwrap();
    let b = distill_demo(&req).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.student_regions.len(), a.grid_size * a.grid_size);
    assert!(a.student_accuracy > 0.6, "{}", a.student_accuracy);
    assert!(distill_demo(&DistillRequest { lambda: 1.5, ..req }).is_err());
}

#[test]
fn overlay_reports_every_point() {
    let r = probe_overlay(&OverlayRequest {
        n: 30,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(r.synthetic.len(), 30);
    assert_eq!(r.noise.len(), 30);
    assert!((0.0..=1.0).contains(&r.synthetic_label_agreement));
}

#[test]
fn json_boundary_rejects_garbage() {
    assert!(serde_json::from_str::<ExplorerRequest>("{\"n\": \"many\"}").is_err());
    let partial: DistillRequest = serde_json::from_str("{\"lambda\": 0.3}").unwrap();
    assert_eq!(partial.probes, 64);
}
