//! Format reward, gates, the sigmoid tie-breaker and the autoscaler.
use enigma::rewards::{
    autoscale_update, entropy_gate, format_gate_schedule, mi_tiebreak_reward, tiebreak_z, xml_format_reward,
    AutoscalerState, GateStatus,
};

fn main() -> enigma::Result<()> {
    for text in [
        "<reasoning>2+2</reasoning><answer>4</answer>",
        "<reasoning>2+2</reasoning>\n<answer>4</answer>",
        "<answer>4</answer>",
    ] {
        println!("{:>3}  {text:?}", xml_format_reward(text));
    }

    let entropies = [0.4, 0.9, 1.3, 2.2, 0.7];
    println!("entropy gate @0.8: {:?}", entropy_gate(&entropies, 0.8)?);
    for step in [0, 14, 15] {
        println!(
            "format gate active at step {step} (warmup 50): {}",
            format_gate_schedule(step, 50)
        );
    }

    let gates = GateStatus {
        entropy_pass: true,
        format_pass: true,
        format_active: true,
    };
    let mut scaler = AutoscalerState::default();
    for (step, cands) in [[1.2, 0.3, 0.1], [0.2, 0.9, 0.4], [0.5, 0.5, 0.5]].iter().enumerate() {
        let z = tiebreak_z(cands);
        let r = mi_tiebreak_reward(z, 2.5, 0.15, &gates, scaler.beta);
        scaler = autoscale_update(&scaler, r, 1.0);
        println!(
            "step {step}: z={z:+.4} r_mi={r:.4} beta -> {:.5} (rho {:.4})",
            scaler.beta,
            scaler.ratio()
        );
    }
    Ok(())
}
