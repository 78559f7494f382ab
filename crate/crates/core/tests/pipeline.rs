use poseforge::checkpoint::Persist;
use poseforge::inverter::{predict, InversionConfig, Models};
use poseforge::pose_gan::{train_single_pose, SinglePoseGenerator, WganTrainConfig};
use poseforge::seq_gan::{train_sequence, SeqTrainConfig, SequenceDiscriminator, SequenceGenerator};
use poseforge::synthdata::{default_dataset, load_sequences, save_sequences, GenerateOptions, Split};

/// Data → G0 → sequence GAN → checkpoints on disk → prediction, at toy size.
#[test]
fn tiny_pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let opts = GenerateOptions { per_class: 4, ..Default::default() };
    let ds = default_dataset(&opts, 2).unwrap();
    let data_path = dir.path().join("data.jsonl");
    save_sequences(&ds, &data_path).unwrap();
    let ds = load_sequences(&data_path).unwrap();
    assert_eq!(ds, default_dataset(&opts, 2).unwrap());

    let pose_cfg = WganTrainConfig { steps: 10, hidden: 16, batch_size: 16, ..Default::default() };
    let (g0, _, hist) = train_single_pose(&ds.frames(Some(Split::Train)), &pose_cfg, 1, |_| {}).unwrap();
    assert_eq!(hist.len(), 10);
    let seq_cfg = SeqTrainConfig { steps: 4, noise_dim: 6, hidden: 8, disc_hidden: 6, batch_size: 4, ..Default::default() };
    let frozen = g0.clone();
    let (gen, disc, _) = train_sequence(&ds.subset(Split::Train), &g0, &seq_cfg, 2, |_| {}).unwrap();
    assert_eq!(g0, frozen);

    let p = |n: &str| dir.path().join(n);
    g0.save(&p("g0.pfg")).unwrap();
    gen.save(&p("gen.pfg")).unwrap();
    disc.save(&p("disc.pfg")).unwrap();
    let g0 = SinglePoseGenerator::load(&p("g0.pfg")).unwrap();
    let gen = SequenceGenerator::load(&p("gen.pfg")).unwrap();
    let disc = SequenceDiscriminator::load(&p("disc.pfg")).unwrap();
    assert_eq!(g0, frozen);

    let target = ds.split(Split::Test)[0];
    let models = Models::new(&g0, &gen, &disc).with_length(target.len());
    let cfg = InversionConfig { pool_size: 8, restarts: 2, ..Default::default() };
    let res = predict(&target.frames[..4], target.class, &models, &cfg, 3).unwrap();
    assert_eq!(res.sequence.len(), target.len());
    assert_eq!(&res.sequence.frames[..4], &target.frames[..4]);
    assert!(res.blend_residual < 1e-9);
    assert_eq!(res.restarts.len(), 2);
    for r in &res.restarts {
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.objective <= r.trace[0]);
    }
    assert_eq!(res, predict(&target.frames[..4], target.class, &models, &cfg, 3).unwrap());
}
