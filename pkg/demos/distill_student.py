"""Library walk-through: fused teacher to absorptivity-only student.

    python3 demos/distill_student.py

Trains the image+absorptivity model briefly on a small synthetic dataset,
distills a 6.5k-parameter LSTM student from it, and scores the student
against both the teacher and the true labels.  About a minute on one core.
"""

from meltfusion import data as D
from meltfusion import training as TR


def main(seed: int = 0):
    samples = D.synth_generate(D.SynthConfig(n_frames=80, laser_on=5, laser_off=75, seed=seed))
    prepared = D.prepare(samples, target="mp_ratio")
    print(f"{len(prepared.train)} train / {len(prepared.test)} test samples, "
          f"absorptivity scaled from [{prepared.scaler.min:.3f}, {prepared.scaler.max:.3f}]")

    teacher, log, rep, _ = TR.fit_and_evaluate("fused", prepared, TR.recipe("fused", epochs_max=15, seed=seed))
    print(f"teacher  {log.epochs} epochs  test mae {rep.mae:.4f}  r2 {rep.r2:.4f}")

    res = TR.distill(teacher, prepared, TR.recipe("student", epochs_max=200, seed=seed))
    for name, r in (("vs teacher", res.vs_teacher), ("vs labels", res.vs_labels)):
        print(f"student  {name:10s}  mae {r.mae:.4f}  r2 {r.r2:.4f}")


if __name__ == "__main__":
    main()
