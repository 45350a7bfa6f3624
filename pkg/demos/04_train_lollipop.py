"""Train a small network to split lollipops into head and stick."""

from leanpn import harness
from leanpn.networks import build_preset

# 120 clouds of 256 points; 80% train, 20% test
ds = harness.gen_synthetic(seed=0, n_samples=120, n_points=256)
train, test = ds.split("train"), ds.split("test")
print(len(train), "train /", len(test), "test clouds")

spec = build_preset("lpn", "desk", n_points=256)


def show(r):
    print(f"epoch {r.epoch}: loss {r.loss:.3f} acc {r.acc:.3f} miou {r.miou:.3f} "
          f"peak {r.peak_bytes / 2**20:.1f} MB")


net, history = harness.train(spec, train, epochs=5, batch=8, lr=1e-3, seed=0, log=show)

# one pass, then votes over several FPS starts
for passes in (1, 3):
    m = harness.evaluate(net, test, n_passes=passes)
    print(f"test, {passes} pass(es): acc {m['acc']:.3f} mIoU {m['miou']:.3f} pIoU {m['piou']:.3f}")
