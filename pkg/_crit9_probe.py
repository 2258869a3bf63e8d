import numpy as np, time, tempfile
from certitrain.attack import AttackConfig
from certitrain.connector import ConnectorParams
from certitrain.data import synthetic_digits, take_subset
from certitrain.loss import LossKind
from certitrain.train import Schedule, TrainConfig, train_run, natural_accuracy, taps_accuracy
from certitrain.verify import certify_ibp

train_ds = take_subset(synthetic_digits(5000, seed=105), 3000, seed=5)
test_ds = synthetic_digits(500, seed=998)

def run(tag, c=0.5, steps=8, multi=True):
    t0 = time.time()
    cfg = TrainConfig(
        loss=LossKind(tag=tag, w_taps=5.0, connector=ConnectorParams(c=c),
                      attack=AttackConfig(steps=steps, seed=0)),
        schedule=Schedule(total_epochs=14, annealing_epochs=6, warmup_epochs=1,
                          decay_epochs=(11, 13), lr0=2e-3, batch_size=128,
                          eps_target=0.1),
        arch="mlp", hidden=(128, 128), classifier_relus=1, optimizer="adam",
        seed=0, fast_reg_lambda=0.5, val_attack=AttackConfig(steps=5, seed=1))
    with tempfile.TemporaryDirectory() as tmp:
        res = train_run(cfg, train_ds, tmp)
    net = res["state"].best_net or res["state"].net
    nat = natural_accuracy(net, test_ds.images, test_ds.labels)
    cert = np.mean([certify_ibp(net, test_ds.images[i], int(test_ds.labels[i]), 0.1)[0]
                    for i in range(len(test_ds))])
    tacc = taps_accuracy(net, test_ds.images, test_ds.labels, 0.1,
                         AttackConfig(steps=8, seed=3), rng=np.random.default_rng(4))
    print(f"{tag} c={c} steps={steps}: nat={nat:.4f} cert={cert:.4f} taps_acc={tacc:.4f} "
          f"({time.time()-t0:.0f}s)", flush=True)

run("taps_multi", c=0.5)
run("taps_multi", c=0.0)
run("taps_single")
run("taps_multi", steps=1)
run("ibp")
print("done", flush=True)
