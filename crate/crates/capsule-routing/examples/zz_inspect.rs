use capsule_routing::data::{synth, mnist, preprocess::{make_batch, Mode}};
use capsule_routing::net::{Network, NetworkConfig, RoutingSpec};
use capsule_routing::tensor::params::Session;
use capsule_routing::tensor::tape::Tape;

fn main() {
    let dir = std::path::Path::new("/tmp/inspect-digits");
    synth::ensure_digit_corpus(dir, 64, 16, 1).unwrap();
    let ds = mnist::load(dir).unwrap();
    let net = Network::<f32>::build(NetworkConfig::reduced(10, RoutingSpec::similarity_default()), 7).unwrap();
    let idx: Vec<usize> = (0..4).collect();
    let batch = make_batch::<f32>(ds.kind, &ds.train, &idx, Mode::Train, 7, 0).unwrap();
    let tape = Tape::new();
    let sess = Session::new(&tape, &net.store, true);
    let images = tape.constant(batch.images.clone());
    let _ = net.forward(&sess, images).unwrap();
    // walk the tape and report magnitude stats of every SqDistPairs output
    println!("tape has {} nodes", tape.len());
    let stats = net.forward_debug_stats(&sess);
    for (name, lo, mean, hi) in stats {
        println!("{:28} min {:10.3e}  mean {:10.3e}  max {:10.3e}", name, lo, mean, hi);
    }
}
