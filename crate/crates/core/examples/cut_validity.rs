//! Builds the recourse of a random ReLU value network over a small action
//! box and checks that every cut family overestimates it everywhere.
//!
//! cargo run --release --example cut_validity

use nnfvi::cuts::{BinaryEncoding, IntegerOptimalityCut, NeuronClass};
use nnfvi::mcd::{random_instance, RandomInstanceConfig};

fn main() -> nnfvi::Result<()> {
    let inst = random_instance(3, &RandomInstanceConfig { upper: vec![3, 2], neurons: 10, scenarios: 5, ..Default::default() })?;
    let ctx = inst.context()?;
    let actions: Vec<Vec<i64>> = inst.action_box.iter().collect();
    let anchor = vec![1, 1];

    let gradient = ctx.gradient_cut(&anchor);
    let positive = ctx.positive_cut();
    let combined = ctx.combined_cut(&anchor);
    let upper = ctx.recourse_upper_bound();
    let enc = BinaryEncoding::new(&inst.action_box);
    let integer = IntegerOptimalityCut::new(&enc, &anchor, ctx.recourse_value(&anchor), upper)?;

    let mut worst = [f64::INFINITY; 4];
    for a in &actions {
        let slack = [
            gradient.eval(a) - ctx.partial_recourse(a, NeuronClass::Negative),
            positive.eval(a) - ctx.partial_recourse(a, NeuronClass::Positive),
            combined.eval(a) - ctx.recourse_value(a),
            integer.rhs(&enc, a) - ctx.recourse_value(a),
        ];
        for (w, s) in worst.iter_mut().zip(slack) {
            *w = w.min(s);
        }
    }
    println!("{} actions, {} neurons, {} scenarios", actions.len(), ctx.neurons(), ctx.scenarios());
    println!("minimum slack  gradient {:.3e}  positive {:.3e}  combined {:.3e}  integer {:.3e}", worst[0], worst[1], worst[2], worst[3]);
    println!("combined cut is tight at the anchor: {:.3e}", combined.eval(&anchor) - ctx.recourse_value(&anchor));
    println!("recourse upper bound {upper:.4}, best recourse {:.4}", actions.iter().map(|a| ctx.recourse_value(a)).fold(f64::NEG_INFINITY, f64::max));
    Ok(())
}
