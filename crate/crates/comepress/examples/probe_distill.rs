use comepress::eval::report::load_prune_report;
use comepress::model::checkpoint::load_checkpoint;
use comepress::model::CaptureSpec;
use comepress::tensor::nn;
use comepress::tensor::tape::Tape;

fn main() {
    let teacher = load_checkpoint(std::path::Path::new("/tmp/bench1200/base.ckpt")).unwrap();
    let student = load_checkpoint(std::path::Path::new("/tmp/prune1200/pruned.ckpt")).unwrap();
    let report = load_prune_report(std::path::Path::new("/tmp/prune1200/prune_report.json")).unwrap();
    let corpus = comepress::eval::Corpus::builtin();
    let ws = comepress::eval::windows(&corpus.train, 128, 128).unwrap();
    let mut ids = Vec::new();
    for w in &ws[..4] { ids.extend_from_slice(&w.input); }
    let tb = comepress::model::TokenBatch::new(4, 128, ids).unwrap();

    let (_, t_trace) = teacher.forward(&tb, &CaptureSpec::hidden_only()).unwrap();
    let mut tape = Tape::new();
    let fwd = student.forward_tape(&mut tape, &tb, Some(2), false).unwrap();
    // pair (a=2 -> b=1), (a=4 -> b=2)
    let mut total = None;
    for &(a, b) in &report.mapping.pairs {
        let th = &t_trace.hidden[a + 1];
        let rows = th.rows_2d(); let d = th.last_dim();
        let p_const = nn::softmax_axis(th, th.ndim() - 1).unwrap().reshape(&[rows, d]).unwrap();
        // how peaked?
        let mx = p_const.data().iter().fold(0f32, |m, &x| m.max(x));
        let ones = p_const.data().iter().filter(|&&x| x == 1.0).count();
        println!("pair ({a},{b}): teacher max prob {mx}, exact-1.0 rows {} / {}", ones, rows);
        let p = tape.leaf(p_const);
        let s2 = tape.reshape(fwd.hidden[b + 1], &[rows, d]).unwrap();
        let q = tape.softmax(s2, 1).unwrap();
        let kl = tape.kl_div(p, q).unwrap();
        println!("  kl = {}", tape.value(kl).scalar_value());
        total = Some(match total { Some(t) => tape.add(t, kl).unwrap(), None => kl });
    }
    let loss = tape.scale(total.unwrap(), 0.5);
    println!("loss = {}", tape.value(loss).scalar_value());
    let mut grads = tape.backward(loss).unwrap();
    for &(_, b) in &report.mapping.pairs {
        let lv = &fwd.params.layers[b];
        let mut l2 = 0f64;
        for v in lv.vars() {
            if let Some(g) = grads.take(v) {
                l2 += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            } else {
                println!("  layer {b}: a var has NO grad");
            }
        }
        println!("layer {b} grad l2 = {}", l2.sqrt());
    }
}
