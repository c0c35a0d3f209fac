"""
Módulos do MAT-SEI
Autodiff, sinais I/Q, CVNN, losses semi-supervisionadas, treino e avaliação
"""
