from pemma.gradcheck import END_TO_END_TOL, LAYER_TOL, end_to_end_check, layer_checks


class TestLayerChecks:
    def test_all_layers_pass(self):
        results = layer_checks(seed=3)
        covered = {r.name.split("/")[0] for r in results}
        assert {"matmul", "softmax", "layer_norm", "linear", "conv3d", "conv_transpose3d", "skip_conv",
                "patch_embed", "transformer_block", "dice_ce_loss"} <= covered
        bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
        assert not bad
        assert all(r.tol == LAYER_TOL for r in results)


class TestEndToEnd:
    def test_shallow_pemma(self):
        # the full-depth check runs in the acceptance suite
        (r,) = end_to_end_check(seed=1, depth=2, coords_per_tensor=2)
        assert r.passed and r.tol == END_TO_END_TOL
