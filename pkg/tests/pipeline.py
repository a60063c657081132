"""Drive the command line end to end in-process on a small synthetic pair."""
import os

from fadacs.cli import main

TINY_CONFIG = """
[arch]
hidden = 8
code = 4
disc_hidden = 16

[train]
epochs = 2
adapt_steps = 40

[experiment]
horizons = [1, 3]
transfer_epochs = 2
"""


def run(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"fadacs {' '.join(map(str, argv))} exited {code}"


def featurize_pair(root, seed=7, days=4, target_days=3, anomalies=3):
    """synth -> ingest -> cluster -> featurize for both domains; returns the featurized dirs."""
    root = str(root)
    syn = os.path.join(root, "syn")
    run("synth", "--out", syn, "--seed", seed, "--days", days, "--target-days", target_days,
        "--anomalies", anomalies)
    out = {}
    for d in ("Source", "Target"):
        raw = os.path.join(syn, d)
        ing, cl, ft = (os.path.join(root, f"{stage}_{d}") for stage in ("ing", "cl", "ft"))
        run("ingest", "--events", os.path.join(raw, "events.csv"), "--out", ing)
        run("cluster", "--events", os.path.join(ing, "events_clean.csv"), "--slots", os.path.join(raw, "slots.csv"),
            "--method", "sector", "--threshold-m", 40, "--out", cl)
        run("featurize", "--events", os.path.join(ing, "events_clean.csv"), "--lots", os.path.join(cl, "lots.json"),
            "--pois", os.path.join(raw, "pois.csv"), "--hours", os.path.join(raw, "opening_hours.csv"),
            "--weather", os.path.join(raw, "weather.csv"), "--out", ft)
        out[d] = ft
    return out


def end_to_end(root):
    """Full pipeline including train, adapt, evaluate and report; returns the output dirs."""
    root = str(root)
    os.makedirs(root, exist_ok=True)
    cfg = os.path.join(root, "tiny.toml")
    with open(cfg, "w", encoding="utf-8") as fh:
        fh.write(TINY_CONFIG)
    ft = featurize_pair(root)
    dirs = {name: os.path.join(root, name) for name in ("train", "adapt", "evaluate", "report")}
    run("--config", cfg, "train", "--source", ft["Source"], "--out", dirs["train"])
    run("--config", cfg, "adapt", "--source", ft["Source"], "--target", ft["Target"],
        "--train-dir", dirs["train"], "--out", dirs["adapt"])
    run("--config", cfg, "evaluate", "--source", ft["Source"], "--target", ft["Target"],
        "--train-dir", dirs["train"], "--adapt-dir", dirs["adapt"], "--out", dirs["evaluate"])
    run("--config", cfg, "report", "--source", ft["Source"], "--target", ft["Target"], "--out", dirs["report"])
    return dirs


def file_bytes(root, suffixes=(".json", ".fdck", ".csv", ".dat")):
    """Relative path -> bytes for every artifact under ``root`` except manifests (they hold timings)."""
    out = {}
    for base, _, names in os.walk(root):
        for name in names:
            if name == "manifest.json" or not name.endswith(suffixes):
                continue
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out
