import random

import pytest

from nnemd.dlog import BSGS, FULL_TABLE, NotInRange, TableTooLarge, build_solver, solve


class TestFullTable:
    def test_exhaustive_small(self, g64):
        s = build_solver(g64, 300, FULL_TABLE)
        for f in range(-300, 301):
            assert solve(s, g64.gexp(f)) == f

    def test_out_of_range(self, g64):
        s = build_solver(g64, 50, FULL_TABLE)
        for f in (51, -51, 10**6):
            with pytest.raises(NotInRange):
                solve(s, g64.gexp(f))

    def test_memory_cap(self, g64):
        with pytest.raises(TableTooLarge):
            build_solver(g64, 10**6, FULL_TABLE, memory_cap=1000)


class TestBsgs:
    def test_exhaustive_small(self, g64):
        s = build_solver(g64, 300, BSGS)
        assert s.giant_stride == 25  # ceil(sqrt(601))
        for f in range(-300, 301):
            assert solve(s, g64.gexp(f)) == f

    @pytest.mark.parametrize("fb", [1, 2, 7, 12, 99, 1000])
    def test_edges(self, g64, fb):
        s = build_solver(g64, fb, BSGS)
        for f in (-fb, -fb + 1, -1, 0, 1, fb - 1, fb):
            assert solve(s, g64.gexp(f)) == f
        for f in (fb + 1, -fb - 1):
            with pytest.raises(NotInRange):
                solve(s, g64.gexp(f))

    def test_random_large_bound(self, g512):
        s = build_solver(g512, 10**9, BSGS)
        r = random.Random(4)
        for _ in range(30):
            f = r.randint(-10**9, 10**9)
            assert solve(s, g512.gexp(f)) == f

    def test_element_outside_range_is_rejected(self, g64):
        s = build_solver(g64, 1000, BSGS)
        with pytest.raises(NotInRange):
            solve(s, g64.gexp(int(g64.p) // 2))

    def test_bound_must_leave_results_unique(self):
        from nnemd.group import named_group

        with pytest.raises(ValueError):
            build_solver(named_group("tiny"), 5)
        build_solver(named_group("tiny"), 4)  # 2*4 + 1 = 9 < 11

    def test_tiny_group_agrees_with_brute_force(self):
        from nnemd.group import named_group

        G = named_group("tiny")
        s = build_solver(G, 4, BSGS)
        for f in range(-4, 5):
            h = pow(4, f % 11, 23)
            brute = [k for k in range(-4, 5) if pow(4, k % 11, 23) == h]
            assert solve(s, h) == brute[0] == f

    def test_bad_mode(self, g64):
        with pytest.raises(ValueError):
            build_solver(g64, 10, "magic")
