use cfm::config::Config;
use cfm::data::{Problem, ProblemSpec, sample_pairs};
use cfm::nets::VelocityModel;
use cfm::objectives::{huber_c_for_dim, loss_stage2, CfmLossConfig, Metric, TrajectoryBatch, interpolate, endpoint_map};
use cfm::schedules::TimeSampler;
use cfm::tensor::{RngStream, Tape, Tensor};
use cfm::trainer::{train_stage1, Adam, Models};

fn f_profile(models: &Models, label: &str) {
    // One fixed noise draw; print f(t, x_t) across t.
    let mut s = RngStream::new(4242);
    let x0 = Tensor::standard_normal(&mut s, &[1, 2]).unwrap();
    let m = [1.5, -0.5];
    let cond = models.emb.embed(&[0]).unwrap().detach();
    print!("{label}: x0=({:.2},{:.2}) ", x0.row(0)[0], x0.row(0)[1]);
    for &tv in &[0.0, 0.2, 0.4, 0.6, 0.8, 0.9] {
        let t = Tensor::new(vec![tv], &[1]).unwrap();
        let x1 = Tensor::new(vec![m[0], m[1]], &[1, 2]).unwrap();
        let x_t = interpolate(&x0, &x1, &t).unwrap();
        let v = models.vf.velocity(&t, &x_t, &cond, None, false, None).unwrap();
        let f = endpoint_map(&t, &x_t, &v, &[0], 1).unwrap();
        print!("f({tv:.1})=({:.3},{:.3}) ", f.row(0)[0], f.row(0)[1]);
    }
    println!();
}

fn main() {
    let mut cfg = Config::default();
    cfg.run.seed = 5;
    cfg.run.stage1_epochs = 50;
    cfg.run.learning_rate = 1e-3;
    cfg.run.batch_size = 16;
    cfg.run.segments = 1;
    cfg.data = ProblemSpec::new(Problem::SinglePoint);
    cfg.data.samples_per_epoch = 640;

    let s1 = train_stage1(&cfg).unwrap();
    let mut models = Models::from_checkpoint(&s1.checkpoint).unwrap();
    models.emb.frozen = true;
    f_profile(&models, "stage1");

    let delta = 0.1;
    let loss_cfg = CfmLossConfig { segments: 1, alpha: 1e-5, metric: Metric::SquaredL2, huber_c: huber_c_for_dim(2), delta_t: delta };
    let sampler = TimeSampler::new(1, delta).unwrap();
    let master = RngStream::new(5).child(102);
    let (mut data_s, mut time_s, mut drop_s) = (master.child(2), master.child(3), master.child(4));
    let sizes: Vec<usize> = models.vf.named_parameters().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(1e-4, &sizes);
    for epoch in 0..60 {
        for _ in 0..40 {
            let pair = sample_pairs(&cfg.data, &mut data_s, 16).unwrap();
            let (times, seg) = sampler.sample(&mut time_s, 16);
            let tape = Tape::new();
            let vf_w = models.vf.watched(&tape).unwrap();
            let cond = models.emb.embed(&pair.labels).unwrap();
            let masks = vf_w.sample_masks(&mut drop_s, 16).unwrap();
            let b = TrajectoryBatch { x0: pair.x0, x1: pair.x1, t: Tensor::new(times, &[16]).unwrap(), seg, delta_t: delta, cond };
            let out = loss_stage2(&vf_w, &b, &loss_cfg, Some(&masks)).unwrap();
            let grads = Tape::backward(&out.total).unwrap();
            let watched: Vec<Tensor> = vf_w.named_parameters().into_iter().map(|(_, t)| t).collect();
            let glist: Vec<Tensor> = watched.iter().map(|p| grads.wrt(p)).collect();
            let current: Vec<Tensor> = models.vf.named_parameters().into_iter().map(|(_, t)| t).collect();
            let newp = adam.apply(&current, &glist, 1.0).unwrap();
            models.vf.set_parameters(&newp).unwrap();
        }
        if epoch % 20 == 19 {
            f_profile(&models, &format!("s2 epoch {epoch}"));
        }
    }
}
