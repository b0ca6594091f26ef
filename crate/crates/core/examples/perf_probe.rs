use std::time::Instant;
use ugdseg_core::data::{synth_generate, SynthSpec};
use ugdseg_core::losses::{total_loss, LossConfig};
use ugdseg_core::network::{Network, NetworkConfig};
use ugdseg_core::tape::Session;
use ugdseg_core::trainer::{batch_tensors, sgd_step, OptimizerState};

fn main() {
    let cfg = NetworkConfig::default();
    let mut net = Network::new(cfg, 42).unwrap();
    let spec = SynthSpec::default();
    let samples = synth_generate(&spec, 16).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let (images, masks) = batch_tensors(&refs).unwrap();
    let mut opt = OptimizerState::new(0.9, 1e-4);
    for it in 0..3 {
        let t = Instant::now();
        let mut sess = Session::new(&net.store, true);
        let out = net.forward(&mut sess, &images).unwrap();
        let fwd = t.elapsed();
        let lb = total_loss(&mut sess, &out, &masks, &LossConfig::default(), true).unwrap();
        let t2 = Instant::now();
        sess.tape.backward(lb.total_id).unwrap();
        let bwd = t2.elapsed();
        let (grads, bn) = sess.finish();
        net.store.accumulate_grads(&grads).unwrap();
        net.apply_bn_updates(&bn).unwrap();
        sgd_step(&mut net, &mut opt, 1e-3).unwrap();
        net.store.zero_grads();
        println!("step {it}: fwd {fwd:?} bwd {bwd:?} total {:?} loss {:.4}", t.elapsed(), lb.total);
    }
    let t = Instant::now();
    let _ = net.predict(&images, (1.0, 1.0)).unwrap();
    println!("predict batch16: {:?}", t.elapsed());
}
