"""Push one random batch through every projector variant.

Prints output shapes and the added-parameter budget at both presets, then
checks the two identities that make the variants comparable: concatenation
keeps the vision tokens untouched and weighted addition with alpha = 0 is
the plain vision path.

    python3 demos/fusion_variants.py
"""
import numpy as np

from segfusion import projector as pj


def main():
    dims = pj.preset("desk")
    rng = np.random.default_rng(0)
    F_I = rng.normal(size=(2, dims.T_v, dims.D))
    R = rng.normal(size=(2, dims.d_R))
    S = (rng.random((2, dims.n_cls, 32, 32)) < 0.05).astype(np.uint8)

    variants = [pj.FusionVariant(k) for k in ("baseline", "replace", "learned_mixing", "weighted_addition")]
    variants += [pj.FusionVariant("concatenation"), pj.FusionVariant("concatenation", use_segmaps=True)]
    print(f"{'variant':<28}{'projector out':<18}{'added (desk)':>14}{'added (paper)':>16}")
    for v in variants:
        params = pj.init_params(dims, v, 0)
        out = pj.projector_forward(params, F_I, R, S if v.use_segmaps else None)
        name = v.kind.value + ("+segmaps" if v.use_segmaps else "")
        paper = pj.count_params(v, pj.preset("paper"))
        print(f"{name:<28}{str(out.shape):<18}{pj.count_params(v, dims).added:>14,d}"
              f"{100 * paper.added_fraction:>15.3f}%")

    concat = pj.init_params(dims, pj.FusionVariant("concatenation", use_segmaps=True), 1)
    _, p = pj.bind(concat)
    fused = pj.fuse(concat.variant, p, F_I, R, S).value
    print("\nconcatenation keeps F_I bit-exact:", fused[:, : dims.T_v].tobytes() == F_I.tobytes())
    wa = pj.init_params(dims, pj.FusionVariant("weighted_addition", alpha_init=0.0), 1)
    _, p = pj.bind(wa)
    print("weighted addition at alpha=0 is F_I:", pj.fuse(wa.variant, p, F_I, R).value.tobytes() == F_I.tobytes())

    segs = pj.count_params(pj.FusionVariant("concatenation", use_segmaps=True), pj.preset("paper"))
    print(f"segmap branch / feature branch parameters at the paper preset: {segs.segmap_to_feature_ratio:.2f}")


if __name__ == "__main__":
    main()
