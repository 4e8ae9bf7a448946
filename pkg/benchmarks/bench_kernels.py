"""Compiled kernels vs the numpy fallback.

Times each fused kernel on training-sized inputs, then one full training step
(forward, backward, Adam) of the default 16x16 model in a subprocess per
backend, since the backend is fixed at import.

    python benchmarks/bench_kernels.py [--repeat 50] [--batch 32]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

STEP_SNIPPET = r"""
import json, sys, timeit
import numpy as np
import promptpsi.tensor as T
from promptpsi.codec import CodecConfig, CodecModel
from promptpsi.irs import SystemConfig, generate_dataset

model = CodecModel(CodecConfig(), np.random.default_rng(0))
params = model.group("enc") + model.group("dec") + model.group("embed")
opt = T.Adam(params, lr=1e-3)
batch = int(sys.argv[2])
x = generate_dataset(SystemConfig(), "NLoS", batch, seed=0)
prompt = T.Tensor(np.zeros(model.cfg.d_p), requires_grad=True)
noise = 0.1 * np.random.default_rng(1).normal(size=(batch, model.cfg.latent_len(0.25)))

def step():
    loss, _ = model.reconstruction_loss(x, prompt, 0.25, noise)
    opt.step(T.grad(loss, params))

step()
n = int(sys.argv[1])
print(json.dumps({"backend": T.BACKEND, "step_s": min(timeit.repeat(step, number=1, repeat=n))}))
"""


def kernel_times(impl, repeat):
    r = np.random.default_rng(0)
    x = r.normal(size=(64 * 16, 128))
    g = r.normal(size=x.shape)
    gain, bias = r.normal(size=128), r.normal(size=128)
    att = r.normal(size=(64 * 16 * 4, 16))
    flat = r.normal(size=250_000)
    m, v = np.zeros_like(flat), np.ones_like(flat)
    _, xhat, rstd = impl.layer_norm_fwd(x, gain, bias, 1e-12)
    y = impl.softmax_fwd(att)
    _, t = impl.gelu_fwd(x)
    cases = {
        "layer_norm fwd+bwd": lambda: (impl.layer_norm_fwd(x, gain, bias, 1e-12),
                                       impl.layer_norm_bwd(g, xhat, rstd, gain)),
        "softmax fwd+bwd": lambda: (impl.softmax_fwd(att), impl.softmax_bwd(att, y)),
        "gelu fwd+bwd": lambda: (impl.gelu_fwd(x), impl.gelu_bwd(g, x, t)),
        "adam (250k params)": lambda: impl.adam_update(flat.copy(), flat, m, v, 1e-3, 0.9, 0.999, 0.5, 0.5, 1e-8),
    }
    return {k: min(timeit.repeat(f, number=1, repeat=repeat)) for k, f in cases.items()}


def step_time(pure, repeat, batch):
    env = dict(os.environ)
    if pure:
        env["PROMPTPSI_PURE_PYTHON"] = "1"
    else:
        env.pop("PROMPTPSI_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(repeat), str(batch)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--step-repeat", type=int, default=10)
    ap.add_argument("--batch", type=int, default=32, help="training-step batch (default: the training batch size)")
    args = ap.parse_args(argv)

    from promptpsi.tensor import _kernels_py
    try:
        from promptpsi.tensor import _kernels
    except ImportError:
        _kernels = None
        print("compiled extension not built; only the numpy fallback is timed")

    py = kernel_times(_kernels_py, args.repeat)
    cy = kernel_times(_kernels, args.repeat) if _kernels else {}
    print(f"{'kernel':<22}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for k, t in py.items():
        if k in cy:
            print(f"{k:<22}{t * 1e3:>10.3f}{cy[k] * 1e3:>11.3f}{t / cy[k]:>8.2f}x")
        else:
            print(f"{k:<22}{t * 1e3:>10.3f}")

    slow = step_time(True, args.step_repeat, args.batch)
    print(f"\ntraining step, batch {args.batch}, {slow['backend']}: {slow['step_s'] * 1e3:.1f} ms")
    if _kernels:
        fast = step_time(False, args.step_repeat, args.batch)
        print(f"training step, batch {args.batch}, {fast['backend']}: {fast['step_s'] * 1e3:.1f} ms "
              f"({slow['step_s'] / fast['step_s']:.2f}x)")


if __name__ == "__main__":
    main()
