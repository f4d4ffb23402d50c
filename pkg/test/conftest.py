import pytest

from solaudit import utils
from solaudit.app import new_conf
from solaudit.backend import ScriptedBackend
from solaudit.session import Session
from solaudit.solidity import FunctionRecord

WITHDRAW = """function withdraw(uint amount) external {
 require(balances[msg.sender] >= amount);
 (bool ok, ) = msg.sender.call{value: amount}("");
 require(ok);
 balances[msg.sender] -= amount;
}"""


def function_of(source=WITHDRAW, contract="Bank", name="withdraw", signature="withdraw(uint256)"):
    fid = f"{contract}.{signature}#{utils.sha256_hex(source)[:8]}"
    return FunctionRecord(fid, contract, name, signature, source, (1, source.count("\n") + 1), "external", path="Bank.sol")


@pytest.fixture
def fn():
    return function_of()


@pytest.fixture
def make_session():
    """Factory of sessions answered by a scripted backend, config keys given as dotted overrides."""

    def make(rules=(), default="", transcript=None, **overrides):
        conf = new_conf()
        for k, v in overrides.items():
            conf[k.replace("__", ".")] = v
        return Session(conf, ScriptedBackend(rules, default_reply=default, transcript=transcript))

    return make
