#!/usr/bin/env python3
"""Convert public node-classification datasets into the adrgnn container.

Sources (read from local files; nothing is downloaded):

  linqs      cora.content + cora.cites (original LINQS release)
  planetoid  ind.<name>.{x,tx,allx,y,ty,ally,graph,test.index}
  geom       out1_node_feature_label.txt + out1_graph_edges.txt (chameleon, squirrel, ...)

Published Geom-GCN split files (<name>_split_0.6_0.2_<k>.npz) are converted
verbatim with --splits; otherwise random 48/32/20 permutations are written.

    python3 tools/convert_graph.py geom --src new_data/chameleon --splits splits --name chameleon --out data/chameleon
"""

import argparse
import json
import pickle
import sys
from pathlib import Path

import numpy as np

FORMAT = "adrgnn-dataset"
SCHEMA_VERSION = 1


def write_container(out, name, features, labels, edges, masks, normalize, metadata):
    out.mkdir(parents=True, exist_ok=True)
    n = features.shape[0]
    arrays = {
        "edges": np.asarray(edges, dtype="<i8").reshape(-1, 2),
        "features": np.asarray(features, dtype="<f8"),
        "labels": np.asarray(labels, dtype="<i8"),
        "train_masks": masks[0].astype("<i8"),
        "val_masks": masks[1].astype("<i8"),
        "test_masks": masks[2].astype("<i8"),
    }
    specs = {}
    for key, a in arrays.items():
        a = np.ascontiguousarray(a)
        a.tofile(out / f"{key}.bin")
        specs[key] = {"dtype": "f64" if a.dtype.kind == "f" else "i64", "shape": list(a.shape), "file": f"{key}.bin"}
    manifest = {
        "format": FORMAT,
        "schema_version": SCHEMA_VERSION,
        "kind": "graph",
        "name": name,
        "n_nodes": n,
        "normalize_features": normalize,
        "metadata": metadata,
        "arrays": specs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"{name}: {n} nodes, {len(arrays['edges'])} edge rows, {features.shape[1]} features, "
          f"{int(labels.max()) + 1} classes, {masks[0].shape[0]} splits -> {out}")


def read_linqs(src, name):
    content = [line.split() for line in (src / f"{name}.content").read_text().splitlines() if line.strip()]
    ids = {row[0]: i for i, row in enumerate(content)}
    features = np.array([[float(v) for v in row[1:-1]] for row in content])
    classes = sorted({row[-1] for row in content})
    labels = np.array([classes.index(row[-1]) for row in content])
    edges = []
    for line in (src / f"{name}.cites").read_text().splitlines():
        parts = line.split()
        if len(parts) != 2:
            continue
        cited, citing = parts
        if cited in ids and citing in ids:
            edges.append((ids[citing], ids[cited]))
    return features, labels, np.array(edges)


def read_planetoid(src, name):
    def load(part):
        with open(src / f"ind.{name}.{part}", "rb") as f:
            return pickle.load(f, encoding="latin1")

    x, tx, allx, y, ty, ally, graph = (load(p) for p in ["x", "tx", "allx", "y", "ty", "ally", "graph"])
    test_index = [int(v) for v in (src / f"ind.{name}.test.index").read_text().split()]
    order = np.sort(test_index)
    dense = lambda m: m.toarray() if hasattr(m, "toarray") else np.asarray(m)
    features = np.vstack([dense(allx), dense(tx)])
    onehot = np.vstack([ally, ty])
    features[test_index] = features[order]
    onehot[test_index] = onehot[order]
    labels = onehot.argmax(1)
    edges = sorted({(min(i, j), max(i, j)) for i, nbrs in graph.items() for j in nbrs})
    return features, labels, np.array(edges)


def read_geom(src):
    rows = (src / "out1_node_feature_label.txt").read_text().splitlines()[1:]
    n = len(rows)
    feats, labels = [None] * n, np.zeros(n, dtype=int)
    for line in rows:
        node, feat, label = line.split("\t")
        feats[int(node)] = [float(v) for v in feat.split(",")]
        labels[int(node)] = int(label)
    width = max(len(f) for f in feats)
    features = np.zeros((n, width))
    for i, f in enumerate(feats):
        # Some releases store sparse index lists of uneven length.
        if len(f) == width:
            features[i] = f
        else:
            features[i, np.asarray(f, dtype=int)] = 1.0
    edges = []
    for line in (src / "out1_graph_edges.txt").read_text().splitlines()[1:]:
        a, b = line.split("\t")
        edges.append((int(a), int(b)))
    return features, labels, np.array(edges)


def geom_splits(split_dir, name, n):
    files = sorted(split_dir.glob(f"{name}_split_0.6_0.2_*.npz"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if not files:
        sys.exit(f"no {name}_split_0.6_0.2_*.npz files in {split_dir}")
    masks = [[], [], []]
    for f in files:
        z = np.load(f)
        for k, key in enumerate(["train_mask", "val_mask", "test_mask"]):
            m = np.asarray(z[key]).astype(bool)
            if m.shape != (n,):
                sys.exit(f"{f}: {key} has shape {m.shape}, expected ({n},)")
            masks[k].append(m)
    return tuple(np.array(m) for m in masks)


def random_splits(n, k, seed, ratios=(0.48, 0.32, 0.20)):
    rng = np.random.default_rng(seed)
    n_train, n_val = int(ratios[0] * n), int(ratios[1] * n)
    n_test = min(int(round(ratios[2] * n)), n - n_train - n_val)
    masks = np.zeros((3, k, n), dtype=bool)
    for s in range(k):
        p = rng.permutation(n)
        masks[0, s, p[:n_train]] = True
        masks[1, s, p[n_train:n_train + n_val]] = True
        masks[2, s, p[n_train + n_val:n_train + n_val + n_test]] = True
    return masks[0], masks[1], masks[2]


def homophily(edges, labels):
    e = edges[edges[:, 0] != edges[:, 1]]
    return float((labels[e[:, 0]] == labels[e[:, 1]]).mean()) if len(e) else 0.0


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("source", choices=["linqs", "planetoid", "geom"])
    ap.add_argument("--src", type=Path, required=True, help="directory with the raw files")
    ap.add_argument("--name", required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--splits", type=Path, help="directory with Geom-GCN split .npz files")
    ap.add_argument("--n-splits", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-normalize", action="store_true", help="do not row-normalize features at load time")
    args = ap.parse_args()

    if args.source == "linqs":
        features, labels, edges = read_linqs(args.src, args.name)
    elif args.source == "planetoid":
        features, labels, edges = read_planetoid(args.src, args.name)
    else:
        features, labels, edges = read_geom(args.src)
    n = features.shape[0]
    if args.splits:
        masks, split_source = geom_splits(args.splits, args.name, n), "geom-gcn"
    else:
        masks, split_source = random_splits(n, args.n_splits, args.seed), f"generated (numpy seed {args.seed})"
    metadata = {
        "homophily": homophily(edges, labels),
        "n_classes": int(labels.max()) + 1,
        "split_source": split_source,
        "source": f"{args.source}:{args.src}",
    }
    write_container(args.out, args.name, features, labels, edges, masks, not args.no_normalize, metadata)


if __name__ == "__main__":
    main()
