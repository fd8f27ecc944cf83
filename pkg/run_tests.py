#!/usr/bin/env python3
"""
Script para ejecutar la suite de pruebas y generar reportes
Las pruebas lentas (corridas completas, IQL) se pueden saltar con --fast
"""

import subprocess
import sys
import os
from datetime import datetime

CATEGORIES = [
    ("Mundo y circuitos", ["tests/test_world.py", "tests/test_tracks.py"], "🗺️"),
    ("Estimación", ["tests/test_estimation.py"], "🧭"),
    ("Práctica", ["tests/test_practice.py"], "🏁"),
    ("Redes", ["tests/test_networks.py"], "🧠"),
    ("Replay", ["tests/test_replay.py"], "💾"),
    ("Enlace", ["tests/test_link.py"], "📡"),
    ("Aprendiz", ["tests/test_learner.py"], "📈"),
    ("Robot", ["tests/test_robot.py"], "🚗"),
    ("Preentrenamiento", ["tests/test_pretrain.py"], "🧪"),
    ("Arnés", ["tests/test_harness.py"], "🏎️"),
    ("CLI", ["tests/test_cli.py"], "⌨️"),
    ("API", ["tests/test_api.py"], "🌐"),
]


def run_tests_with_reports(fast: bool = False):
    """Ejecutar todas las pruebas con reporte JUnit y luego por categorías"""

    marker = ["-m", "not slow"] if fast else []

    print("🧪 INICIANDO SUITE DE PRUEBAS")
    print("="*60)
    print(f"📅 Fecha: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"🔧 Framework: pytest + FastAPI TestClient + click CliRunner")
    print(f"🐢 Pruebas lentas: {'omitidas' if fast else 'incluidas'}")
    print("="*60)

    # 1. Suite completa con reporte JUnit XML
    print("\n📋 1. EJECUTANDO SUITE COMPLETA (JUNIT XML)...")
    cmd = [sys.executable, "-m", "pytest", "tests", "--junitxml=test_report.xml", "-q", *marker]
    try:
        result = subprocess.run(cmd, capture_output=False, text=True, cwd=".")
        print(f"✅ Suite completada (Exit code: {result.returncode})")
        print("   📄 XML Report: test_report.xml")
    except Exception as e:
        print(f"❌ Error en la suite: {e}")

    # 2. Pruebas por categorías con output detallado
    print("\n🎯 2. EJECUTANDO PRUEBAS POR CATEGORÍAS...")
    failed = []
    for name, paths, icon in CATEGORIES:
        print(f"\n{icon} Ejecutando pruebas de {name}...")
        cmd_cat = [sys.executable, "-m", "pytest", *paths, "-v", "-s", "--tb=short", *marker]
        try:
            result_cat = subprocess.run(cmd_cat, capture_output=False, text=True, cwd=".")
            status = "✅ EXITOSO" if result_cat.returncode == 0 else "❌ FALLIDO"
            if result_cat.returncode != 0:
                failed.append(name)
            print(f"   {status} (Exit code: {result_cat.returncode})")
        except Exception as e:
            failed.append(name)
            print(f"   ❌ Error: {e}")

    print("\n" + "="*60)
    print("🎉 SUITE DE PRUEBAS COMPLETADA")
    print("="*60)
    if failed:
        print(f"❌ Categorías con fallos: {', '.join(failed)}")
    print("📁 Archivos generados:")
    print("   • test_report.xml       (Reporte JUnit XML)")
    print("="*60)
    return 1 if failed else 0


if __name__ == "__main__":
    # Verificar que estamos en el directorio correcto
    if not os.path.exists("app") or not os.path.exists("tests"):
        print("❌ Error: Ejecutar desde el directorio raíz del proyecto")
        sys.exit(1)
    # Verificar que pytest está instalado
    try:
        import pytest  # noqa: F401
    except ImportError:
        print("❌ Error: Instalar pytest")
        print("💡 Ejecutar: pip install -r requirements.txt")
        sys.exit(1)

    sys.exit(run_tests_with_reports(fast="--fast" in sys.argv))
