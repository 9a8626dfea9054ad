use cfm::config::Config;
use cfm::data::{Problem, ProblemSpec, sample_pairs};
use cfm::nets::VelocityModel;
use cfm::objectives::{huber_c_for_dim, loss_stage2, CfmLossConfig, Metric, TrajectoryBatch};
use cfm::sampler::euler_sample;
use cfm::schedules::TimeSampler;
use cfm::tensor::{RngStream, Tape, Tensor};
use cfm::trainer::{train_stage1, Adam, Models};

fn nfe1_err(models: &Models) -> f64 {
    let mut s = RngStream::new(777);
    let x0 = Tensor::standard_normal(&mut s, &[256, 2]).unwrap();
    let cond = models.emb.embed(&vec![0usize; 256]).unwrap().detach();
    let (x1, _) = euler_sample(&models.vf, &x0, &cond, 1).unwrap();
    let mut acc = 0.0;
    for r in 0..256 {
        let p = x1.row(r);
        acc += ((p[0] - 1.5f64).powi(2) + (p[1] + 0.5).powi(2)).sqrt();
    }
    acc / 256.0
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args[1].parse().unwrap();
    let delta: f64 = args[2].parse().unwrap();
    let batch: usize = args[3].parse().unwrap();
    let epochs: usize = args[4].parse().unwrap();
    let spe: usize = args[5].parse().unwrap();
    let width: usize = args.get(6).map(|v| v.parse().unwrap()).unwrap_or(128);
    let huber: bool = args.get(7).map(|v| v == "huber").unwrap_or(false);

    let mut cfg = Config::default();
    cfg.run.seed = 5;
    cfg.run.stage1_epochs = 50;
    cfg.run.learning_rate = 1e-3;
    cfg.run.batch_size = 16;
    cfg.run.segments = 1;
    cfg.net.hidden_width = width;
    cfg.data = ProblemSpec::new(Problem::SinglePoint);
    cfg.data.samples_per_epoch = 640;

    let s1 = train_stage1(&cfg).unwrap();
    let mut models = Models::from_checkpoint(&s1.checkpoint).unwrap();
    models.emb.frozen = true;
    println!("after stage1: err {:.4}", nfe1_err(&models));

    let loss_cfg = CfmLossConfig {
        segments: 1, alpha: 1e-5,
        metric: if huber { Metric::PseudoHuber } else { Metric::SquaredL2 },
        huber_c: huber_c_for_dim(2), delta_t: delta,
    };
    let sampler = TimeSampler::new(1, delta).unwrap();
    let master = RngStream::new(5).child(102);
    let mut data_s = master.child(2);
    let mut time_s = master.child(3);
    let mut drop_s = master.child(4);
    let sizes: Vec<usize> = models.vf.named_parameters().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(lr, &sizes);
    let steps = (spe / batch).max(1);

    for epoch in 0..epochs {
        let mut eloss = 0.0;
        for _ in 0..steps {
            let pair = sample_pairs(&cfg.data, &mut data_s, batch).unwrap();
            let (times, seg) = sampler.sample(&mut time_s, batch);
            let tape = Tape::new();
            let vf_w = models.vf.watched(&tape).unwrap();
            let cond = models.emb.embed(&pair.labels).unwrap();
            let masks = vf_w.sample_masks(&mut drop_s, batch).unwrap();
            let b = TrajectoryBatch { x0: pair.x0, x1: pair.x1, t: Tensor::new(times, &[batch]).unwrap(), seg, delta_t: delta, cond };
            let out = loss_stage2(&vf_w, &b, &loss_cfg, Some(&masks)).unwrap();
            eloss += out.total.item().unwrap();
            let grads = Tape::backward(&out.total).unwrap();
            let watched: Vec<Tensor> = vf_w.named_parameters().into_iter().map(|(_, t)| t).collect();
            let glist: Vec<Tensor> = watched.iter().map(|p| grads.wrt(p)).collect();
            let current: Vec<Tensor> = models.vf.named_parameters().into_iter().map(|(_, t)| t).collect();
            let newp = adam.apply(&current, &glist, 1.0).unwrap();
            models.vf.set_parameters(&newp).unwrap();
        }
        if epoch % 5 == 4 || epoch < 5 {
            println!("epoch {epoch}: loss {:.6} err {:.4}", eloss / steps as f64, nfe1_err(&models));
        }
    }
}
