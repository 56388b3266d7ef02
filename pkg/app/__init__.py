# app package