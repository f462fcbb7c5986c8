"""Smoke test for the s2r2 extension module.

Build and install first:
    pip install maturin && maturin develop -m crates/python/Cargo.toml --release
"""

import json
import math
import os
import sys
import tempfile

import s2r2


def check(cond, msg):
    if not cond:
        print(f"FAIL {msg}")
        sys.exit(1)
    print(f"ok   {msg}")


def main():
    check(abs(s2r2.rouge_l("a b c d", "a c d") - 6 / 7) < 1e-9, "rouge_l")
    check(abs(s2r2.edit_rate("a b c", "a b d") - 1 / 3) < 1e-9, "edit_rate")
    check(s2r2.pdr(0.0, 0.3) is None, "pdr undefined at zero clean score")
    check(abs(s2r2.e_risk(0.2, 0.1, 0.4) - 0.21) < 1e-9, "e_risk")

    txt = "name ann. age 42. city oslo. job cook."
    a = s2r2.perturb_text(txt, "typo", 7, typo_rate=0.5)
    check(a == s2r2.perturb_text(txt, "typo", 7, typo_rate=0.5), "perturbation is deterministic")
    syn = s2r2.perturb_text("big cat", "synonym", 0, synonym_rate=1.0, lexicon=[("big", ["large"])])
    check(syn == "large cat", "forced synonym")

    cost = [[0.0, 1.0], [1.0, 0.0]]
    ex = s2r2.solve_exact(cost, [0.5, 0.5], [0.5, 0.5])
    sk = s2r2.solve_sinkhorn(cost, [0.5, 0.5], [0.5, 0.5], epsilon=1e-3)
    check(abs(ex["objective"]) < 1e-12 and abs(sk["objective"] - ex["objective"]) < 1e-3, "transport solvers agree")
    check(abs(s2r2.sem_loss([0.0, 0.0, 0.0], 10.0) - math.log(3) / 10) < 1e-12, "sem_loss floor")

    m = s2r2.Model('{"d_model": 16, "d_ff": 32, "max_seq": 96}')
    out = m.generate("name ann.", 8)
    check(isinstance(out, str), f"generate -> {out!r}")
    norms = m.lora_norms()
    check(norms["prod_f_sum"] == 0.0, "adapters start inert")

    rep = s2r2.gradcheck()
    check(rep["pass"], "gradcheck")

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "train.jsonl")
        with open(data, "w") as f:
            for i in range(4):
                f.write(json.dumps({"id": f"r{i}", "src": f"name ann. age 4{i}.", "tgt": f"ann is 4{i}."}) + "\n")
        cfg = json.dumps({"model": {"d_model": 16, "d_ff": 32, "max_seq": 96}, "train": {"steps": 6, "log_every": 2}})
        run = os.path.join(tmp, "run")
        man = s2r2.train(data, run, cfg)
        check(man["command"] == "train", "train")
        loaded = s2r2.Model.load(os.path.join(run, "checkpoint"))
        check(loaded.lora_norms()["b_f_sum"] > 0.0, "trained adapters reload")
        ev = s2r2.evaluate(os.path.join(run, "checkpoint"), data, os.path.join(tmp, "ev"))
        check(any(p.endswith("summary.json") for p in ev["outputs"]), "evaluate")
        r = s2r2.report([f"run={run}/train_log.csv"], os.path.join(tmp, "rep"))
        check(os.path.exists(os.path.join(tmp, "rep", "norms.svg")), f"report ({len(r['flags'])} flags)")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
