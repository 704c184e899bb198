# src package marker