"""Dev-only calibration for the trend run; not part of the package."""
import sys
import time

import numpy as np

from fedleak import corpus as C, model as M, fed as F, attack as A
from fedleak.metrics import top_fraction_mean

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 0.004
tau = float(sys.argv[2]) if len(sys.argv) > 2 else 0.5
top_p = float(sys.argv[3]) if len(sys.argv) > 3 else 0.9
seed = int(sys.argv[4]) if len(sys.argv) > 4 else 1234
density = float(sys.argv[5]) if len(sys.argv) > 5 else 0.5
max_len = int(sys.argv[6]) if len(sys.argv) > 6 else 80
n_docs = 200

spec = C.CorpusSpec(n_docs=n_docs, pii_density=density, seed=7)
corp = C.generate_synthetic_corpus(spec)
vocab = C.build_vocab(corp, 1000)
lens = [len(C.tokenize(d.text)) for d in corp]
print(f"lr={lr} tau={tau} p={top_p} seed={seed} density={density} maxlen={max_len} vocab={len(vocab)} doclen={min(lens)}/{sum(lens)/len(lens):.0f}/{max(lens)}", flush=True)

plan = C.partition(corp, 4, 12, seed=99)
mc = M.ModelConfig(context_len=8, embed_dim=32, hidden_dims=(128,), vocab_size=len(vocab), init_seed=11)
fc = F.FedConfig(n_clients=4, n_rounds=12, local_iters=200, batch_size=8, lr=lr)
atk_basic = F.AttackSpec(task="zero_input", config=A.AttackConfig(scheme="basic", n_samples=30, top_p=top_p, max_len=max_len))
atk_enh = F.AttackSpec(task="zero_input", config=A.AttackConfig(scheme="enhanced", n_samples=30, top_p=top_p, temperature=tau, max_len=max_len))

t0 = time.time()
res = F.run_training(corp, vocab, plan, mc, fc, attacks=[atk_basic, atk_enh], master_seed=seed, jobs=1)
elapsed = time.time() - t0

def series(name):
    by_round = {}
    for r in res.attack_records[name]:
        by_round.setdefault(r["round"], []).append(r["rougeL"])
    return [top_fraction_mean(by_round[t], 0.10) for t in sorted(by_round)]

sb = series("zero_input_basic")
se = series("zero_input_enhanced")
print(f"time: {elapsed:.1f}s")
print("loss:", " ".join(f"{l['global_loss']:.2f}" for l in res.round_logs))
print("basic   top10:", " ".join(f"{v:.3f}" for v in sb))
print("enhanced top10:", " ".join(f"{v:.3f}" for v in se))
ma = [sum(sb[i:i+3])/3 for i in range(len(sb)-2)]
print("basic 3-round MA:", " ".join(f"{v:.3f}" for v in ma))
print("MA non-decreasing:", all(ma[i+1] >= ma[i] - 1e-12 for i in range(len(ma)-1)))
print("final-minus-baseline:", f"{sb[-1]-sb[0]:.3f}", "(need >= 0.3)")
print("enh mean r2..12:", f"{np.mean(se[1:]):.4f}", "basic:", f"{np.mean(sb[2:]):.4f}", "(enh series starts at r1)")
