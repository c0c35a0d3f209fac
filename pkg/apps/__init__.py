"""
Aplicações de linha de comando do MAT-SEI
"""
