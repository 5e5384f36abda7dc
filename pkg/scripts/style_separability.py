"""Style-embedding separability across the three corpus rendering styles.

Reports nearest-centroid accuracy and the inter/intra distance ratio.
"""

import argparse

import numpy as np

from printforge import corpus, masterprint, styleembed


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--prints", type=int, default=9)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = masterprint.make_rng(args.seed)
    extractor = styleembed.StyleExtractor(0)
    embs = {s: [] for s in corpus.STYLES}
    for i in range(args.prints):
        cls = masterprint.CLASSES[i % len(masterprint.CLASSES)]
        mp = masterprint.generate_masterprint(cls, args.seed * 104729 + i)
        for style in corpus.STYLES:
            for quality in corpus.QUALITIES:
                img = corpus.center_crop(corpus.render_style(mp.image, style,
                                                             quality, rng))
                embs[style].append(extractor(img).vector)

    names = list(embs)
    centroids = {s: np.mean(embs[s], 0) for s in names}
    correct = total = 0
    for s in names:
        for v in embs[s]:
            pred = min(names, key=lambda t: np.linalg.norm(v - centroids[t]))
            correct += pred == s
            total += 1
    intra = [np.linalg.norm(a - b) for s in names
             for i, a in enumerate(embs[s]) for b in embs[s][i + 1:]]
    inter = [np.linalg.norm(a - b) for i, s in enumerate(names)
             for t in names[i + 1:] for a in embs[s] for b in embs[t]]
    print(f"nearest-centroid accuracy: {correct / total:.3f}")
    print(f"intra mean {np.mean(intra):.3f}  inter mean {np.mean(inter):.3f}  "
          f"ratio {np.mean(inter) / np.mean(intra):.2f}")


if __name__ == "__main__":
    main()
