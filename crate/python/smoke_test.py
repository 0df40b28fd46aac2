"""Smoke test for the cotune_py extension.

Build and install first:
    cd crates/python && maturin build --release -o dist && pip install dist/*.whl
"""

import math
import tempfile
from pathlib import Path

import cotune_py as ct


def main():
    spec = ct.TaskSpec.preset("toy-qa", seed=0)
    again = ct.TaskSpec.from_toml(spec.to_toml())
    assert again.hash == spec.hash

    ds = spec.generate()
    assert ds.len("train") > 0 and ds.len("eval") > 0
    ex = ds.example(0)
    assert set(ex) == {"feature", "instruction", "answer"}

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        ds.save(str(tmp / "ds.json"))
        assert ct.Dataset.load(str(tmp / "ds.json")).content_hash() == ds.content_hash()

        model = ct.Model(spec, seed=0)
        loss = model.loss(ds, list(range(8)))
        assert math.isfinite(loss) and loss > 0
        rec = model.measure(ds, list(range(8)), lr_s=1e-3, lr_t=1e-3)
        assert rec["d_s"] >= 0 and rec["d_t"] >= 0 and rec["kappa"] > 0
        assert model.loss(ds, list(range(8))) == loss, "measure must not move the model"
        assert all(0 <= t < spec.vocab_size for t in model.decode(ds, 0))

        assert ct.distribution_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
        assert abs(ct.distribution_distance([1.0, 0.0], [0.0, 1.0], "sqrt-js") - 1.0) < 1e-12
        assert ct.compute_kappa(1.0, 0.0) == (1000.0, True)
        lr_t, lr_s = ct.coordinated_rates(1.0, alpha=1e-4, gamma=0.5)
        assert abs(lr_t + lr_s - 2e-4) < 1e-18 and lr_t == lr_s

        bound, first = ct.convergence_bound(
            k=100, alpha=0.1, beta2=0.99, lam=1.0, r=1.0, l=1.0, f0=1.0, f_star=0.0
        )
        assert abs(bound - 0.6893781794493145) < 1e-12 and abs(first - 0.1) < 1e-15

        cfg = f"""
name = "smoke"
method = "commit"
steps = 20
eval_every = 10
checkpoint_every = 10
out_dir = "{tmp / 'runs' / 'smoke'}"
[pretrain]
steps = 20
[scheduler]
strategy = "coordinated"
"""
        last = ct.run_experiment(cfg)
        assert len(last) == 1 and last[0]["step"] == 20
        rows = ct.report([str(tmp / "runs")], str(tmp / "report"))
        assert rows[0]["final_step"] == 20

    try:
        ct.TaskSpec.preset("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset must raise ValueError")

    print("python smoke test OK")


if __name__ == "__main__":
    main()
