#!/usr/bin/env python3
"""
Test script to verify the MAT-SEI installation.
Checks imports, the diagnostics helpers and a tiny end-to-end forward pass.
Runs under pytest or standalone (python tests/test_installation.py).
"""

import sys
import traceback
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import diagnostico  # noqa: E402


def test_basic_imports():
    """Runtime dependencies import."""
    print("📦 Testing basic imports...")
    assert diagnostico.check_basic_dependencies()


def test_project_modules():
    """Every project module imports."""
    print("🔧 Testing project modules...")
    assert diagnostico.check_project_modules()


def test_python_version():
    assert diagnostico.check_python_version()


def test_dev_dependencies_never_fail():
    assert diagnostico.check_dev_dependencies() is True


def test_gradient_smoke():
    print("📐 Testing gradient check...")
    assert diagnostico.check_gradient_smoke()


def test_run_checks_and_summary(capsys):
    checks = diagnostico.run_checks()
    assert set(checks) == {'python', 'dependencies', 'dev_dependencies', 'modules', 'gradient_check'}
    diagnostico.generate_summary(checks)
    out = capsys.readouterr().out
    assert "RESUMO DO DIAGNÓSTICO" in out
    assert "✅ gradient_check" in out


def test_missing_dependency_is_reported(monkeypatch, capsys):
    monkeypatch.setattr(diagnostico, 'BASIC_DEPS', [("modulo_que_nao_existe", "Fantasma")])
    assert diagnostico.check_basic_dependencies() is False
    assert "❌ Fantasma" in capsys.readouterr().out


def test_functional():
    """A tiny CVNN classifies a synthetic batch."""
    print("🧪 Testing functionality...")
    from modules import cvnet, sigkit
    from modules.cvnet import ModelConfig

    cfg = sigkit.DatasetConfig(num_classes=2, sample_length=16, per_class_count=4, labeled_ratio=0.5,
                               test_per_class_count=1)
    dataset = sigkit.normalize_min_max(sigkit.build_dataset(cfg))
    model = ModelConfig(num_blocks=1, channels=2, kernel=3, variant='short', num_classes=2, input_length=16)
    params = cvnet.init_params(model.validate(), seed=0)
    features, logits = cvnet.predict_logits(params, dataset.test.samples)
    assert features.shape == (2, 128)
    assert logits.shape == (2, 2)


def main():
    """Execute all checks."""
    print("🚀 Starting validation tests...\n")

    tests = [
        ("Basic Imports", test_basic_imports),
        ("Project Modules", test_project_modules),
        ("Gradient Check", test_gradient_smoke),
        ("Functional Test", test_functional),
    ]

    results = []
    for name, test_func in tests:
        try:
            test_func()
            results.append((name, True))
        except Exception as e:
            print(f"❌ Critical error in {name}: {e}")
            traceback.print_exc()
            results.append((name, False))

    print("\n" + "=" * 50)
    print("📊 FINAL REPORT")
    print("=" * 50)
    for name, result in results:
        print(f"{name}: {'✅ PASSED' if result else '❌ FAILED'}")
    passed = sum(1 for _, ok in results if ok)
    print(f"\n{passed}/{len(results)} checks passed")
    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
