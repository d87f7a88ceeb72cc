// SPDX-License-Identifier: Apache-2.0

//! Freezes the benchmark expectations: the constants in `common::expected`
//! must stay arithmetically self-consistent. The scenario suites then assert
//! the simulator reproduces those same constants, so a cost-model edit that
//! shifts any figure fails loudly here or there — never silently.

mod common;

use common::expected::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL_PCT_POINTS
}

#[test]
fn per_op_totals_imply_reported_improvements() {
    for m in &MICRO {
        let derived = improvement_pct(m.kvm_per_op, m.duv_per_op);
        assert!(
            close(derived, m.reported_improvement_pct),
            "{}: derived {derived:.4}% vs reported {:.2}%",
            m.scenario,
            m.reported_improvement_pct
        );
    }
}

#[test]
fn absolute_savings_are_exact_differences() {
    let per_op = |name: &str| {
        let m = MICRO.iter().find(|m| m.scenario == name).unwrap();
        (m.kvm_per_op, m.duv_per_op)
    };
    let (k, d) = per_op("s2pf");
    assert_eq!(k - d, S2PF_SAVING);
    let (k, d) = per_op("mmio");
    assert_eq!(k - d, MMIO_SAVING);
    let (k, d) = per_op("vipi");
    assert_eq!(k - d, VIPI_SAVING);
    let (k, d) = per_op("io-notify");
    assert_eq!(k - d, IO_SAVING);
}

#[test]
fn breakdown_shares_match_their_totals() {
    let s2pf_kvm = MICRO.iter().find(|m| m.scenario == "s2pf").unwrap().kvm_per_op;
    assert!(close(100.0 * S2PF_ALLOC_CYCLES / s2pf_kvm, S2PF_ALLOC_SHARE_PCT));

    let mmio_kvm = MICRO.iter().find(|m| m.scenario == "mmio").unwrap().kvm_per_op;
    assert!(close(100.0 * MMIO_TRANSFER_CYCLES / mmio_kvm, MMIO_TRANSFER_SHARE_PCT));

    assert_eq!(IO_NOTIFY_KVM - IO_NOTIFY_DUV, IO_NOTIFY_SAVING);
    assert!(close(improvement_pct(IO_NOTIFY_KVM, IO_NOTIFY_DUV), IO_NOTIFY_IMPROVEMENT_PCT));
    assert_eq!(IO_HANDLE_KVM - IO_HANDLE_DUV, IO_HANDLE_SAVING);
    assert!(close(improvement_pct(IO_HANDLE_KVM, IO_HANDLE_DUV), IO_HANDLE_IMPROVEMENT_PCT));
}

#[test]
fn alternative_calibration_buckets_sum() {
    assert_eq!(ARM_MMIO_KERNEL + ARM_MMIO_USER, ARM_MMIO_TOTAL);
}

#[test]
fn window_multisets_are_defined_for_every_scenario() {
    for m in &MICRO {
        let ms = window_multiset(m.scenario, 3);
        assert!(!ms.is_empty());
        // Every window has matched entry/exit counts.
        let count = |k: &str| ms.iter().find(|(n, _)| *n == k).map(|(_, c)| *c).unwrap_or(0);
        assert_eq!(count("vm_exit"), count("vm_entry"), "{}", m.scenario);
    }
}
