#pragma once

#include "wsdesc/errors.hpp"
#include "wsdesc/parallel.hpp"
#include "wsdesc/pointcloud.hpp"
#include "wsdesc/spatial_index.hpp"
#include "wsdesc/io.hpp"
#include "wsdesc/datagen.hpp"
#include "wsdesc/lrf.hpp"
#include "wsdesc/voxelizer.hpp"
#include "wsdesc/autodiff.hpp"
#include "wsdesc/descriptor.hpp"
#include "wsdesc/matching.hpp"
#include "wsdesc/alignment.hpp"
#include "wsdesc/registration.hpp"
#include "wsdesc/metrics.hpp"
#include "wsdesc/evaluation.hpp"
#include "wsdesc/trainer.hpp"
#include "wsdesc/gradsuite.hpp"
