from cardioradiomics.radiomics.discretize import DiscretizedRegion, discretize
from cardioradiomics.radiomics.extract import FAMILIES, RadiomicsConfig, extract_radiomics, feature_names
from cardioradiomics.radiomics.firstorder import first_order_features
from cardioradiomics.radiomics.shape import shape3d_features
from cardioradiomics.radiomics.texture import (TextureMatrix, glcm_features, glcm_matrices,
                                               gldm_features, glrlm_features, glrlm_matrices,
                                               glszm_features, ngtdm_features)
