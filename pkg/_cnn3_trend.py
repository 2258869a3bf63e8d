import numpy as np, time, tempfile
from certitrain.attack import AttackConfig
from certitrain.connector import ConnectorParams
from certitrain.data import synthetic_digits, take_subset
from certitrain.loss import LossKind
from certitrain.train import Schedule, TrainConfig, train_run, natural_accuracy
from certitrain.verify import certify_ibp

train_ds = take_subset(synthetic_digits(12000, seed=100), 10000, seed=0)
test_ds = synthetic_digits(500, seed=999)

def run(tag, seed):
    t0 = time.time()
    cfg = TrainConfig(
        loss=LossKind(tag=tag, w_taps=5.0, connector=ConnectorParams(c=0.5),
                      attack=AttackConfig(steps=8, seed=0)),
        schedule=Schedule(total_epochs=20, annealing_epochs=8, warmup_epochs=1,
                          decay_epochs=(15, 18), lr0=2e-3, batch_size=128,
                          eps_target=0.1, grad_clip=10.0),
        arch="cnn3", classifier_relus=1, optimizer="adam",
        seed=seed, fast_reg_lambda=0.5, val_attack=AttackConfig(steps=5, seed=1))
    with tempfile.TemporaryDirectory() as tmp:
        res = train_run(cfg, train_ds, tmp)
    for name, net in (("best", res["state"].best_net or res["state"].net),
                      ("final", res["state"].net)):
        nat = natural_accuracy(net, test_ds.images, test_ds.labels)
        cert = np.mean([certify_ibp(net, test_ds.images[i], int(test_ds.labels[i]), 0.1)[0]
                        for i in range(len(test_ds))])
        print(f"cnn3 {tag} seed={seed} [{name}]: nat={nat:.4f} cert={cert:.4f} "
              f"t={time.time()-t0:.0f}s", flush=True)

run("ibp", 0)
run("taps_multi", 0)
print("done", flush=True)
