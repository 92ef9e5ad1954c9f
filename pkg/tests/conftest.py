import pytest

from chartrl import coldstart, data, policy

# The cold-start recipe used by every trained-policy test. Matches the CLI
# defaults; calibration notes live in the repo history, not here.
RECIPE = {
    "bc_epochs": 40,
    "bc_lr": 5e-3,
    "sc_epochs": 12,
    "sc_lr": 2e-3,
    "lr_decay": 0.9,
    "batch_size": 32,
}


@pytest.fixture(scope="session")
def train_tasks():
    return data.gen_split(data.TRAIN_SEED_BASE, data.DEFAULT_TRAIN_SIZE,
                          "medium")


@pytest.fixture(scope="session")
def eval_tasks():
    return data.gen_split(data.EVAL_SEED_BASE, data.DEFAULT_EVAL_SIZE,
                          "medium")


@pytest.fixture(scope="session")
def cold_start(train_tasks):
    """Full cold-start pipeline once per session: imitation training,
    correction-pair construction, multi-turn training. Returns the final
    params plus the intermediate artifacts tests assert against."""
    params = policy.init_params(0)
    params, bc_losses = coldstart.bc_train(
        params, train_tasks, RECIPE["bc_epochs"], RECIPE["bc_lr"],
        RECIPE["batch_size"], seed=0, lr_decay=RECIPE["lr_decay"])
    records, retention = coldstart.build_sc_data(train_tasks, 1.0, seed=0)
    by_id = {t.task_id: t for t in train_tasks}
    params, sc_losses = coldstart.bc_train_multiturn(
        params, records, by_id, RECIPE["sc_epochs"], RECIPE["sc_lr"],
        RECIPE["batch_size"], seed=0, lr_decay=RECIPE["lr_decay"])
    return {
        "params": params,
        "records": records,
        "retention": retention,
        "bc_losses": bc_losses,
        "sc_losses": sc_losses,
    }
