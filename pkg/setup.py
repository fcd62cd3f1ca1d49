from setuptools import find_packages, setup
from setuptools.command.test import test as TestCommand
import sys


class PyTest(TestCommand):
    def finalize_options(self):
        super().finalize_options()
        self.test_args = []
        self.test_suite = True

    def run_tests(self):
        import pytest
        sys.exit(pytest.main(self.test_args))


def read(filename):
    with open(filename) as f:
        return f.read()

setup(
    name='vidctl',
    version='0.1.0',
    author='vidctl contributors',
    description='Learned bandwidth control for H.264 video analyzed by '
                'machines',
    long_description=read('README.rst'),
    license='Apache License, Version 2.0',
    packages=find_packages(exclude=['tests']),
    zip_safe=False,
    python_requires='>=3.9',
    install_requires=[
        'argh>=0.26',
        'av>=10',
        'bitstring>=4',
        'focal-frequency-loss',
        'kornia>=0.6',
        'matplotlib>=3.5',
        'numpy>=1.22',
        'Pillow>=9',
        'torch>=1.13',
        'torchvision>=0.14',
    ],
    tests_require=[
        'pytest',
        'pytest-asyncio',
    ],
    cmdclass={
        'test': PyTest,
    },
    entry_points='''
        [console_scripts]
        vidctl=vidctl.cli:main
    ''',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: Apache Software License',
        'Natural Language :: English',
        'Operating System :: POSIX',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Programming Language :: Python :: 3 :: Only',
        'Topic :: Multimedia :: Video :: Conversion',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ]
)
