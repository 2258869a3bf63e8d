import numpy as np, time, tempfile
from certitrain.attack import AttackConfig
from certitrain.connector import ConnectorParams
from certitrain.data import synthetic_digits, take_subset
from certitrain.loss import LossKind
from certitrain.train import Schedule, TrainConfig, train_run, natural_accuracy
from certitrain.verify import certify_ibp

train_ds = take_subset(synthetic_digits(5000, seed=100), 4000, seed=0)
test_ds = synthetic_digits(500, seed=999)

def run(tag, l1, seed=0):
    t0 = time.time()
    cfg = TrainConfig(
        loss=LossKind(tag=tag, w_taps=5.0, connector=ConnectorParams(c=0.5),
                      attack=AttackConfig(steps=8, seed=0)),
        schedule=Schedule(total_epochs=16, annealing_epochs=7, warmup_epochs=1,
                          decay_epochs=(13, 15), lr0=2e-3, batch_size=128,
                          eps_target=0.1),
        arch="mlp", hidden=(128, 128), classifier_relus=1, optimizer="adam",
        seed=seed, l1=l1, fast_reg_lambda=0.5, val_attack=AttackConfig(steps=5, seed=1))
    with tempfile.TemporaryDirectory() as tmp:
        res = train_run(cfg, train_ds, tmp)
    for name, net in (("best", res["state"].best_net or res["state"].net),
                      ("final", res["state"].net)):
        nat = natural_accuracy(net, test_ds.images, test_ds.labels)
        cert = np.mean([certify_ibp(net, test_ds.images[i], int(test_ds.labels[i]), 0.1)[0]
                        for i in range(len(test_ds))])
        print(f"{tag} l1={l1} [{name}]: nat={nat:.4f} cert={cert:.4f} ({time.time()-t0:.0f}s)",
              flush=True)

for l1 in (0.0, 1e-4, 3e-4):
    run("ibp", l1)
    run("taps_multi", l1)
print("done", flush=True)
