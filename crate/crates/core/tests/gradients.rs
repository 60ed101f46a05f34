use gpcl_core::trainer::{gradcheck, micro_config, micro_dataset};

#[test]
fn full_loss_matches_central_differences() {
    let ds = micro_dataset();
    let cfg = micro_config();
    let r = gradcheck(&ds, &cfg, 1e-5).unwrap();
    for (name, e) in &r.per_param {
        println!("{name}\t{e:.3e}");
    }
    assert!(r.max_rel_err < 1e-4, "max rel err {}", r.max_rel_err);
    assert_eq!(r.entries, 2 * (5 + 6 + 7 + 3) * 4);
}
