use fastsearch_core::preset::Preset;

/// Desk preset shrunk to a few seconds of work.
pub fn tiny_preset() -> Preset {
    let mut p = Preset::builtin("desk").unwrap();
    p.space.layers = 3;
    p.space.channel_scale = 0.0625;
    p.task.height = 32;
    p.task.width = 32;
    p.task.train_samples = 8;
    p.task.val_samples = 4;
    p.search.pretrain_epochs = 1;
    p.search.search_epochs = 2;
    p.search.batch_size = 4;
    p.train.epochs = 2;
    p.train.batch_size = 4;
    p.teacher_epochs = 2;
    p.validate().unwrap();
    p
}
