"""Per-preset stage geometry and parameter counts, computed without allocating weights."""
from collections import defaultdict

from emonext.model import PRESETS, parameter_count, parameter_shapes


def main():
    print(f"{'preset':<8}{'input':>6}  {'stage sizes':<16}{'channels':<24}{'tokens':>7}{'params':>14}")
    for name, cfg in PRESETS.items():
        sizes = "/".join(map(str, cfg.stage_sizes))
        chans = "/".join(map(str, cfg.channels))
        print(f"{name:<8}{cfg.input_size:>6}  {sizes:<16}{chans:<24}{cfg.num_tokens:>7}{parameter_count(cfg):>14,}")
    print()
    for name in ("micro", "tiny"):
        groups = defaultdict(int)
        for pname, shape in parameter_shapes(PRESETS[name]):
            n = 1
            for d in shape:
                n *= d
            groups[pname.split(".")[0]] += n
        print(name + ": " + ", ".join(f"{g} {n:,}" for g, n in groups.items()))


if __name__ == "__main__":
    main()
