// Compares backpropagated gradients of a small attention network against
// central finite differences. Spikes use the smooth arctan mode so the
// loss is differentiable everywhere.

use spiking_attention::attention::Variant;
use spiking_attention::network::{NetworkSpec, Phase, SpikingNetwork};
use spiking_attention::neuron::{LifConfig, SpikeMode};
use spiking_attention::tensor::{Rng, Tape, Tensor};
use spiking_attention::training::mse_vote_loss;

fn loss(net: &SpikingNetwork<f64>, x: &Tensor<f64>, labels: &[usize], grads: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut net = net.clone();
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let o = net.forward_on(&mut tape, &vars, x, Phase::Train(&mut Rng::new(0))).expect("forward");
    let l = mse_vote_loss(&mut tape, o, labels).expect("loss");
    let value = tape.value(l).item();
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(l).expect("backward");
    net.params_mut().zero_grad();
    net.params_mut().accumulate_grads(&tape, &vars);
    (value, net.params().iter().map(|p| p.grad.clone()).collect())
}

/// `(name, relative error, analytic norm)` per parameter tensor.
pub fn run_example(seed: u64) -> Result<Vec<(String, f64, f64)>, Box<dyn std::error::Error>> {
    let lif = LifConfig::new(0.5, 0.7).with_mode(SpikeMode::Smooth);
    let spec = NetworkSpec::new("Input-4C3-BN-AP2-4C3-BN-VotingC2P2-AP", [2, 6, 6], Variant::SCTFA, lif, 4, 3)?;
    let mut net = SpikingNetwork::<f64>::new(spec, &Rng::new(seed))?;
    let mut rng = Rng::new(seed).fork_named("frames");
    let x = Tensor::from_fn(&[2, 3, 2, 6, 6], |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
    let labels = [0, 1];
    let (_, analytic) = loss(&net, &x, &labels, true);
    let h = 1e-5;
    let mut out = Vec::new();
    for (pi, a) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        for k in 0..a.len() {
            let orig = net.params().get(pi).value.data()[k];
            net.params_mut().get_mut(pi).value.data_mut()[k] = orig + h;
            let up = loss(&net, &x, &labels, false).0;
            net.params_mut().get_mut(pi).value.data_mut()[k] = orig - h;
            let down = loss(&net, &x, &labels, false).0;
            net.params_mut().get_mut(pi).value.data_mut()[k] = orig;
            let n = (up - down) / (2.0 * h);
            diff2 += (a.data()[k] - n).powi(2);
            num2 += n * n;
        }
        let an = a.l2_norm();
        let rel = diff2.sqrt() / an.max(num2.sqrt()).max(1e-6);
        out.push((net.params().get(pi).name.clone(), rel, an));
    }
    Ok(out)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut worst: f64 = 0.0;
    for (name, rel, norm) in run_example(3)? {
        println!("{name:<28} |grad| {norm:>10.3e}  rel err {rel:.2e}");
        worst = worst.max(rel);
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
