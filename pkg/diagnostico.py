#!/usr/bin/env python3
"""
Script de diagnóstico para o sistema MAT-SEI
Verifica versão do Python, dependências, módulos e roda um gradient check rápido
"""

import importlib
import sys
from pathlib import Path

# Adicionar diretório do projeto ao path
sys.path.insert(0, str(Path(__file__).parent))

BASIC_DEPS = [
    ("numpy", "NumPy"),
    ("scipy", "SciPy"),
    ("pandas", "pandas"),
    ("tqdm", "tqdm"),
]

DEV_DEPS = [
    ("pytest", "pytest"),
    ("sklearn", "scikit-learn"),
]

PROJECT_MODULES = [
    ("config", "Configurações"),
    ("modules.gradcore", "Autodiff (gradcore)"),
    ("modules.sigkit", "Sinais I/Q (sigkit)"),
    ("modules.cvnet", "CVNN (cvnet)"),
    ("modules.ssl_losses", "Losses semi-supervisionadas"),
    ("modules.mat_trainer", "Treinamento MAT"),
    ("modules.evalkit", "Avaliação"),
    ("modules.experiment", "Experimentos e grid"),
    ("apps.cli", "CLI"),
]


def check_python_version():
    """Verifica a versão do Python"""
    print("🐍 Python Version Check")
    print(f"Versão: {sys.version.split()[0]}")
    ok = sys.version_info >= (3, 8)
    print("✅ Versão do Python OK" if ok else "❌ Python 3.8+ necessário")
    print()
    return ok


def _check_imports(deps, optional=False):
    ok = True
    for module, name in deps:
        try:
            importlib.import_module(module)
            print(f"✅ {name}")
        except ImportError as e:
            if optional:
                print(f"⚪ {name} - não instalado (opcional)")
            else:
                print(f"❌ {name} - FALTANDO ({e})")
                ok = False
    print()
    return ok


def check_basic_dependencies():
    """Verifica dependências básicas"""
    print("📦 Basic Dependencies Check")
    return _check_imports(BASIC_DEPS)


def check_dev_dependencies():
    """Dependências de desenvolvimento (opcionais); sempre retorna True"""
    print("🧪 Dev Dependencies Check (Opcionais)")
    _check_imports(DEV_DEPS, optional=True)
    return True


def check_project_modules():
    """Verifica se todos os módulos do projeto importam"""
    print("🔧 Project Modules Check")
    return _check_imports(PROJECT_MODULES)


def check_gradient_smoke():
    """Gradient check de uma conv complexa minúscula contra diferenças centrais"""
    print("📐 Gradient Check")
    try:
        import numpy as np
        from modules.gradcore import Tensor, conv1d, gradient_check, tsum

        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 2, 8)))
        w = Tensor(rng.normal(size=(3, 2, 3)), requires_grad=True, name='w')
        report = gradient_check(lambda: tsum(conv1d(x, w, padding=1) ** 2), {'w': w})
        ok = report.passed(1e-4)
        print(f"{'✅' if ok else '❌'} erro relativo máximo: {report.max_rel_err:.2e}")
    except Exception as e:
        print(f"❌ Erro: {e}")
        ok = False
    print()
    return ok


def run_checks():
    """Roda todas as verificações e retorna {nome: bool}"""
    checks = {
        'python': check_python_version(),
        'dependencies': check_basic_dependencies(),
        'dev_dependencies': check_dev_dependencies(),
        'modules': check_project_modules(),
        'gradient_check': check_gradient_smoke(),
    }
    return checks


def generate_summary(checks):
    """Gera resumo do diagnóstico"""
    print("📋 RESUMO DO DIAGNÓSTICO")
    print("=" * 50)
    for name, ok in checks.items():
        print(f"{'✅' if ok else '❌'} {name}")
    print()
    print("Para instalar dependências:")
    print("  pip install -r requirements.txt")
    print()
    print("Para executar o sistema:")
    print("  python run_app.py --help")
    print()


def main():
    """Função principal"""
    print("📡 DIAGNÓSTICO DO SISTEMA MAT-SEI")
    print("=" * 50)
    print()
    checks = run_checks()
    generate_summary(checks)
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
