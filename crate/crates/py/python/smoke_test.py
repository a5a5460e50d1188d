"""Quick end-to-end check of the Python bindings on a tiny toy dataset.

Build and install the extension first, e.g. `maturin develop --release`
from crates/py, then run `python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import mega


def main():
    ds = mega.Dataset.toy(num_ids=4, imgs_per_id=8, image_size=16, seed=3)
    assert len(ds) == 32, len(ds)
    assert ds.image_shape == (3, 16, 16)
    assert ds.num_identities == 4
    assert len(ds.indices("query")) == 4
    meta = mega.Dataset.toy(num_ids=4, imgs_per_id=8, image_size=16, seed=4)

    victim = mega.Embedder.train(ds, arch="A", dim=16, epochs=3, lr=5e-3, seed=0)
    clean = victim.evaluate(ds)
    assert 0.0 <= clean["r1_before"] <= 1.0
    assert clean["r1_after"] is None

    attack = mega.Attack.train(
        ds, victim, meta_dataset=meta, epochs=1, lr=1e-3, p=2, k=2, generator_width=4
    )
    assert attack.cell == "l+M+A", attack.cell
    assert len(attack.trace) > 0
    eps = attack.epsilon
    assert math.isclose(eps, mega.epsilon(16.0))

    q = ds.indices("query")
    adv = attack.perturb(ds, q)
    for i, img in zip(q, adv):
        clean_px = ds.image(i)
        worst = max(abs(a - b) for a, b in zip(img, clean_px))
        assert worst <= eps + 1e-6, worst
        assert all(0.0 <= a <= 1.0 for a in img)

    report = attack.evaluate(victim, ds)
    assert report["r1_after"] is not None

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "attack.ckpt"
        attack.save(path)
        again = mega.Attack.load(path)
        assert again.config_hash == attack.config_hash
        assert again.perturb(ds, q) == adv
        vpath = Path(tmp) / "victim.ckpt"
        victim.save(vpath)
        assert mega.Embedder.load(vpath).digest() == victim.digest()

    try:
        mega.Attack.train(ds, victim, meta_dataset=meta, no_such_field=1)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown keyword accepted")

    projected = mega.project_linf([2.0, -1.0, 0.5], [0.5, 0.5, 0.5], 0.1)
    for got, want in zip(projected, [0.6, 0.4, 0.5]):
        assert math.isclose(got, want, abs_tol=1e-6), projected
    assert math.isclose(mega.adv_triplet_loss([0.0], [1.0], [3.0], 1.0), 0.0)
    assert math.isclose(
        mega.mean_average_precision([[0.1, 0.2, 0.3]], [0], [0, 1, 0]), 5.0 / 6.0
    )
    assert mega.cmc_rank_k([[0.1, 0.2, 0.3]], [0], [1, 0, 1], 1) == 0.0
    print("smoke test ok:", clean["r1_before"], "->", report["r1_after"])


if __name__ == "__main__":
    main()
