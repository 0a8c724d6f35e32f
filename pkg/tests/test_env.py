import numpy as np
import pytest

from usrlab.env import (
    FOUR_ROOM_13,
    EpisodeOver,
    GridWorld,
    Position,
    new_world,
    parse_layout,
)


@pytest.fixture
def world():
    return new_world("FourRoom13", 0.95, 300, 7)


def test_layout_has_104_cells(world):
    walls = parse_layout(FOUR_ROOM_13)
    # enumerate floor cells independently of GridWorld
    assert sum(ch == "." for ch in FOUR_ROOM_13) == 104
    assert (~walls).sum() == 104
    assert world.n_cells == 104


def test_doorways_are_open(world):
    for p in [(3, 6), (10, 6), (6, 2), (6, 9)]:
        assert world.is_navigable(p)
    assert not world.is_navigable((6, 6))


def test_new_world_validation():
    with pytest.raises(ValueError):
        new_world("FourRoom13", 0.0, 300, 7)
    with pytest.raises(ValueError):
        new_world("FourRoom13", 1.0, 300, 7)
    with pytest.raises(ValueError):
        new_world("FourRoom13", 0.95, 0, 7)
    with pytest.raises(ValueError):
        new_world("NineRooms", 0.95, 300, 7)


def test_worlds_are_identical(world):
    other = new_world("FourRoom13", 0.95, 300, 7)
    assert world.walls.tobytes() == other.walls.tobytes()
    assert world.cells == other.cells
    assert world.goal_pools() == other.goal_pools()


def test_reset_observation(world):
    obs = world.reset((1, 11), (1, 1))
    assert obs.shape == (169,)
    assert obs[1 * 13 + 1] == 1 and obs.sum() == 1


def test_reset_errors(world):
    with pytest.raises(ValueError):
        world.reset((1, 1), (1, 1))
    with pytest.raises(ValueError):
        world.reset((0, 0), (1, 1))
    with pytest.raises(ValueError):
        world.reset((1, 1), (6, 6))


def test_random_reset_is_seeded():
    a = new_world(seed=11)
    b = new_world(seed=11)
    starts_a = [tuple(a.pos) for _ in range(20) if a.reset((5, 5)) is not None]
    starts_b = [tuple(b.pos) for _ in range(20) if b.reset((5, 5)) is not None]
    assert starts_a == starts_b
    assert (5, 5) not in starts_a


def test_step_right_in_open_space(world):
    world.reset((11, 11), (1, 1))
    t = world.step(3)
    assert world.pos == (1, 2)
    assert t.r_t == 0.0 and t.gamma_t == 0.95
    assert t.s_next[1 * 13 + 2] == 1


def test_step_into_wall_stays(world):
    world.reset((11, 11), (1, 1))
    t = world.step(0)
    assert world.pos == (1, 1)
    assert t.r_t == 0.0 and t.gamma_t == 0.95
    np.testing.assert_array_equal(t.s_t, t.s_next)


def test_reaching_goal_terminates(world):
    world.reset((1, 3), (1, 2))
    t = world.step(3)
    assert t.r_t == 1.0 and t.gamma_t == 0.0 and t.done
    with pytest.raises(EpisodeOver):
        world.step(0)


def test_timeout_terminates_without_reward():
    w = new_world(max_steps=5, seed=0)
    w.reset((11, 11), (1, 1))
    for _ in range(5):
        t = w.step(0)
    assert t.done and t.r_t == 0.0 and t.gamma_t == w.gamma_base


def test_transition_invariants_over_random_steps(world):
    rng = np.random.default_rng(0)
    goals = world.goal_pools()[0]
    n = 0
    while n < 10_000:
        goal = goals[rng.integers(len(goals))]
        world.reset(goal)
        length = 0
        while not world.done:
            t = world.step(int(rng.integers(4)))
            n += 1
            length += 1
            at_goal = world.position_of(t.s_next) == goal
            assert t.gamma_t in (0.0, world.gamma_base)
            assert (t.gamma_t == 0.0) == at_goal
            assert (t.r_t == 1.0) == at_goal and t.r_t in (0.0, 1.0)
            assert t.s_next.sum() == 1 and t.s_t.sum() == 1
            # reward factorization with one-hot features
            assert t.s_next @ world.render_goal(goal) == t.r_t
        assert length <= world.max_steps


def test_dynamics_are_deterministic(world):
    for p in world.cells:
        for a in range(4):
            assert world.move(p, a) == world.move(p, a)
            world.reset((11, 11) if p != (11, 11) else (1, 1), p)
            world.step(a)
            assert world.pos == world.move(p, a)


def test_goal_pools(world):
    source, target = world.goal_pools()
    assert len(source) == 48 and len(target) == 16
    assert not set(source) & set(target)
    assert len(set(source) | set(target)) == 64
    assert all(world.is_navigable(p) for p in source + target)
    assert (source, target) == world.goal_pools()


def test_target_goals_cover_all_rooms(world):
    _, target = world.goal_pools()
    rooms = {(p.row > 6, p.col > 6) for p in target}
    assert len(rooms) == 4


def test_sample_source_goals(world):
    source, target = world.goal_pools()
    assert world.sample_source_goals(48, 0).source == source
    a = world.sample_source_goals(20, 3)
    assert a == world.sample_source_goals(20, 3)
    assert len(a.source) == 20 and set(a.source) <= set(source)
    assert a.target == target
    with pytest.raises(ValueError):
        world.sample_source_goals(0, 0)
    with pytest.raises(ValueError):
        world.sample_source_goals(49, 0)


def test_render_goal(world):
    g = world.render_goal((11, 11))
    assert g[11 * 13 + 11] == 1 and g.sum() == 1
    world.reset((1, 1), (11, 11))
    np.testing.assert_array_equal(world.render_goal((11, 11)), world.observe(world.pos))
    with pytest.raises(ValueError):
        world.render_goal((0, 5))


def test_text_map_loading():
    w = GridWorld.from_text("#####\n#..##\n#####\n", gamma_base=0.9, max_steps=10)
    assert w.cells == [Position(1, 1), Position(1, 2)]
    with pytest.raises(ValueError):
        parse_layout("##\n#x\n")
