//! Scratch exploration (not part of the acceptance gate).

use rdmabox_sim::harness;
use rdmabox_sim::presets;

#[test]
#[ignore]
fn fig7_regulated_curve() {
    let base = presets::fig7();
    let cal = harness::calibrate_window(&base).unwrap();
    println!("window = {} ({} blocks)", cal.window_bytes, cal.window_bytes / 131072);
    for a in [2usize, 4, 6, 8, 10, 12] {
        let mut u = base.clone();
        u.actors = a;
        let ur = harness::run(&u).unwrap();
        let mut r = base.clone();
        r.actors = a;
        r.admission.window_bytes = cal.window_bytes;
        let rr = harness::run(&r).unwrap();
        println!(
            "a={a:2} unreg iops={:9.0} miss={:6} merges={:5} | reg iops={:9.0} miss={:6} merges={:5} mifb={:9.0}",
            ur.iops,
            ur.counters.wqe_cache_miss,
            ur.counters.merges,
            rr.iops,
            rr.counters.wqe_cache_miss,
            rr.counters.merges,
            rr.mean_in_flight_bytes,
        );
    }
}
