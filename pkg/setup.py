from setuptools import setup, find_packages

setup(
    name="solaudit",
    version="1.0",
    description="A package for auditing Solidity smart contracts with voting detectors, reasoners and ranker-critic agents",
    url="https://github.com/jackzzs-lab/solaudit",
    author="Zhesheng Zhou",
    author_email="zhouzzs@foxmail.com",
    packages=find_packages(exclude=["test", "test.*"]),
    package_data={"solaudit": ["templates/*.yaml"]},
    include_package_data=True,
    python_requires=">=3.9",
    zip_safe=False,
    entry_points={
        'console_scripts': [
            'sla = solaudit.cli:cli'
        ]
    },
)
